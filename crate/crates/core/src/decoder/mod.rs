//! Trainable feature-matching decoder.
//!
//! Each stage's patch features are projected into the text space by a
//! linear layer, L2-normalized, and compared with the normal/abnormal text
//! features. The per-patch abnormal probability is upsampled to the input
//! resolution and the four stage maps are averaged.

mod checkpoint;
mod grad;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::features::{FeatureGrid, PatchFeatureStack, INPUT_SIZE, STAGES};
use crate::math::{dice_loss, focal_loss, softmax_pair, Grid2D, LossWeights, Resampler};
use crate::prompts::TextFeaturePair;

pub use checkpoint::DEC_MAGIC;
pub use grad::{loss_gradients, map_loss_gradient, GradientReport};
pub use train::{
    lr_at, train_decoder, train_on_features, EpochRecord, FeatureStandardizer, TrainConfig, TrainItem,
    TrainOutcome,
};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Linear projection of one stage: row-major `in_dim x out_dim` weight and
/// an `out_dim` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl StageParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// `W^T f + b` into `out`.
    #[inline]
    pub fn affine(&self, f: &[f32], out: &mut [f64]) {
        debug_assert_eq!(f.len(), self.in_dim);
        out.copy_from_slice(&self.bias);
        for (k, &fk) in f.iter().enumerate() {
            let fk = fk as f64;
            if fk == 0.0 {
                continue;
            }
            let row = &self.weight[k * self.out_dim..(k + 1) * self.out_dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += fk * w;
            }
        }
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Per-stage projections and the similarity temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub stages: [StageParams; STAGES],
    pub temperature: f64,
}

impl DecoderParams {
    pub fn zeros(stage_dims: [usize; STAGES], text_dim: usize, temperature: f64) -> Self {
        Self {
            stages: std::array::from_fn(|i| StageParams::zeros(stage_dims[i], text_dim)),
            temperature,
        }
    }

    /// Weights drawn from `N(0, 1/C_i)`, zero biases.
    pub fn init(
        stage_dims: [usize; STAGES],
        text_dim: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut p = Self::zeros(stage_dims, text_dim, temperature);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &mut p.stages {
            let normal = Normal::new(0.0, (1.0 / s.in_dim as f64).sqrt()).expect("valid std");
            s.weight.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        }
        p.validate()?;
        Ok(p)
    }

    pub fn text_dim(&self) -> usize {
        self.stages[0].out_dim
    }

    pub fn stage_dims(&self) -> [usize; STAGES] {
        std::array::from_fn(|i| self.stages[i].in_dim)
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(StageParams::param_count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        let td = self.text_dim();
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_dim != td || s.weight.len() != s.in_dim * s.out_dim || s.bias.len() != td {
                return Err(Error::mismatch(format!("decoder stage {i} shape"), td, s.out_dim));
            }
            if s.weight.iter().chain(&s.bias).any(|v| !v.is_finite()) {
                return Err(Error::Degenerate(format!("decoder stage {i} has non-finite weights")));
            }
        }
        Ok(())
    }

    pub(crate) fn check_compat(&self, stack: &PatchFeatureStack, text: &TextFeaturePair) -> Result<()> {
        if text.dim() != self.text_dim() {
            return Err(Error::mismatch("text feature dim", self.text_dim(), text.dim()));
        }
        for (i, (s, g)) in self.stages.iter().zip(&stack.stages).enumerate() {
            if s.in_dim != g.channels {
                return Err(Error::mismatch(format!("stage {i} channels"), s.in_dim, g.channels));
            }
        }
        Ok(())
    }

    /// Visits every parameter in a fixed order: stage by stage, weight then
    /// bias.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for s in &mut self.stages {
            s.weight.iter_mut().chain(s.bias.iter_mut()).for_each(&mut f);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.stages
            .iter()
            .flat_map(|s| s.weight.iter().chain(&s.bias).copied())
            .collect()
    }

    /// `self += scale * other`, same shapes.
    pub fn axpy(&mut self, scale: f64, other: &DecoderParams) {
        for (a, b) in self.stages.iter_mut().zip(&other.stages) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }
}

/// Projected, L2-normalized patch features of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    /// Patches whose projection had zero norm (left as zero vectors).
    pub degenerate: Vec<bool>,
}

impl ProjectedGrid {
    pub fn patch(&self, k: usize) -> &[f64] {
        &self.data[k * self.channels..(k + 1) * self.channels]
    }
}

/// Per patch: `l2_normalize(W^T f + b)`.
pub fn project_stage(grid: &FeatureGrid, params: &StageParams) -> Result<ProjectedGrid> {
    if grid.channels != params.in_dim {
        return Err(Error::mismatch("stage channels", params.in_dim, grid.channels));
    }
    let c = params.out_dim;
    let mut data = vec![0.0; grid.patches() * c];
    let mut degenerate = vec![false; grid.patches()];
    for k in 0..grid.patches() {
        let z = &mut data[k * c..(k + 1) * c];
        params.affine(grid.patch(k), z);
        degenerate[k] = crate::math::l2_normalize_in_place(z).is_none();
    }
    Ok(ProjectedGrid {
        height: grid.height,
        width: grid.width,
        channels: c,
        data,
        degenerate,
    })
}

/// Per-patch abnormal probability for one projected stage.
pub fn stage_probabilities(
    proj: &ProjectedGrid,
    text: &TextFeaturePair,
    temperature: f64,
) -> Grid2D {
    let inv_t = 1.0 / temperature;
    Grid2D::from_fn(proj.height, proj.width, |r, c| {
        let u = proj.patch(r * proj.width + c);
        let ln = crate::math::dot(u, &text.normal) * inv_t;
        let la = crate::math::dot(u, &text.abnormal) * inv_t;
        softmax_pair(ln, la).1
    })
}

/// Averages stage grids after upsampling each to `INPUT_SIZE` square.
pub fn average_upsampled(stage_maps: &[Grid2D]) -> Result<Grid2D> {
    let mut acc = vec![0.0; INPUT_SIZE * INPUT_SIZE];
    let mut buf = vec![0.0; INPUT_SIZE * INPUT_SIZE];
    let scale = 1.0 / stage_maps.len() as f64;
    for g in stage_maps {
        let rs = Resampler::new(g.dims(), (INPUT_SIZE, INPUT_SIZE))?;
        rs.apply_slice(g.values(), &mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b;
        }
    }
    acc.iter_mut().for_each(|a| *a = (*a * scale).clamp(0.0, 1.0));
    Grid2D::new(INPUT_SIZE, INPUT_SIZE, acc)
}

/// Anomaly map at 224x224: mean over stages of the upsampled abnormal
/// probability.
pub fn localize(
    stack: &PatchFeatureStack,
    text: &TextFeaturePair,
    params: &DecoderParams,
) -> Result<Grid2D> {
    params.check_compat(stack, text)?;
    let maps = stack
        .stages
        .iter()
        .zip(&params.stages)
        .map(|(g, p)| Ok(stage_probabilities(&project_stage(g, p)?, text, params.temperature)))
        .collect::<Result<Vec<_>>>()?;
    average_upsampled(&maps)
}

/// Per-pixel probability of the true class: the map value on anomalous
/// pixels, one minus it elsewhere.
pub fn true_class_probability(map: &Grid2D, mask: &Grid2D) -> Result<Grid2D> {
    map.ensure_same_dims(mask, "map vs mask")?;
    let vals = map
        .values()
        .iter()
        .zip(mask.values())
        .map(|(&m, &y)| if y > 0.5 { m } else { 1.0 - m })
        .collect();
    Grid2D::new(map.height(), map.width(), vals)
}

/// `beta * focal + delta * dice`; the token cross-entropy term has no role
/// on the decoder path.
pub fn decoder_loss(map: &Grid2D, mask: &Grid2D, w: &LossWeights) -> Result<f64> {
    if !mask.is_binary() {
        return Err(Error::InvalidDimension("decoder mask must be binary".into()));
    }
    let p_true = true_class_probability(map, mask)?;
    let focal = focal_loss(&p_true, w.gamma);
    let dice = dice_loss(map, mask)?.value;
    Ok(w.beta * focal + w.delta * dice)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::Rng;

    pub fn random_stack(rng: &mut ChaCha8Rng, g: usize, dims: [usize; STAGES]) -> PatchFeatureStack {
        let stages = std::array::from_fn(|i| {
            let c = dims[i];
            let data = (0..g * g * c).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
            FeatureGrid::new(g, g, c, data).unwrap()
        });
        PatchFeatureStack::new(stages, vec![0.5; 8]).unwrap()
    }

    pub fn random_text(rng: &mut ChaCha8Rng, dim: usize) -> TextFeaturePair {
        let n = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let a = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        TextFeaturePair::new(n, a).unwrap()
    }

    pub fn random_mask(rng: &mut ChaCha8Rng) -> Grid2D {
        let (r0, c0) = (rng.random_range(0..150), rng.random_range(0..150));
        let (h, w) = (rng.random_range(20..70), rng.random_range(20..70));
        Grid2D::from_fn(INPUT_SIZE, INPUT_SIZE, |r, c| {
            (r >= r0 && r < r0 + h && c >= c0 && c < c0 + w) as u8 as f64
        })
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use rand::Rng;

    fn basis(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn identity_projection_keeps_unit_vectors() {
        let mut p = StageParams::zeros(4, 4);
        for i in 0..4 {
            p.weight[i * 4 + i] = 1.0;
        }
        let f = [0.5f32, 0.5, 0.5, 0.5];
        let grid = FeatureGrid::new(1, 1, 4, f.to_vec()).unwrap();
        let proj = project_stage(&grid, &p).unwrap();
        assert_eq!(proj.data, vec![0.5; 4]);
        assert!(!proj.degenerate[0]);
    }

    #[test]
    fn zero_projection_is_flagged() {
        let p = StageParams::zeros(3, 5);
        let grid = FeatureGrid::new(2, 1, 3, vec![1.0; 6]).unwrap();
        let proj = project_stage(&grid, &p).unwrap();
        assert_eq!(proj.degenerate, vec![true, true]);
        assert!(proj.data.iter().all(|&v| v == 0.0));
        let bad = FeatureGrid::new(1, 1, 4, vec![1.0; 4]).unwrap();
        assert!(project_stage(&bad, &p).is_err());
    }

    #[test]
    fn projection_matches_naive_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (cin, cout) = (6, 5);
        let mut p = StageParams::zeros(cin, cout);
        p.weight.iter_mut().for_each(|w| *w = rng.random::<f64>() - 0.5);
        p.bias.iter_mut().for_each(|b| *b = rng.random::<f64>() - 0.5);
        let data: Vec<f32> = (0..3 * cin).map(|_| rng.random::<f32>()).collect();
        let grid = FeatureGrid::new(1, 3, cin, data.clone()).unwrap();
        let proj = project_stage(&grid, &p).unwrap();
        for k in 0..3 {
            let mut z = vec![0.0; cout];
            for j in 0..cout {
                z[j] = p.bias[j];
                for i in 0..cin {
                    z[j] += p.weight[i * cout + j] * data[k * cin + i] as f64;
                }
            }
            let n = z.iter().map(|x| x * x).sum::<f64>().sqrt();
            for j in 0..cout {
                assert!((proj.patch(k)[j] - z[j] / n).abs() < 1e-12);
            }
        }
    }

    /// Stack whose every patch projects onto `target` under identity weights.
    fn stack_of(vec: &[f64], g: usize) -> (PatchFeatureStack, DecoderParams) {
        let d = vec.len();
        let stages = std::array::from_fn(|_| {
            let data = (0..g * g).flat_map(|_| vec.iter().map(|&v| v as f32)).collect();
            FeatureGrid::new(g, g, d, data).unwrap()
        });
        let mut params = DecoderParams::zeros([d; STAGES], d, 1.0);
        for s in &mut params.stages {
            for i in 0..d {
                s.weight[i * d + i] = 1.0;
            }
        }
        (PatchFeatureStack::new(stages, vec![1.0; 8]).unwrap(), params)
    }

    #[test]
    fn equidistant_patches_give_half() {
        let text = TextFeaturePair::new(basis(3, 0), basis(3, 1)).unwrap();
        let (stack, params) = stack_of(&[0.0, 0.0, 1.0], 4);
        let m = localize(&stack, &text, &params).unwrap();
        assert_eq!(m.dims(), (224, 224));
        assert!(m.values().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn patches_on_abnormal_vector() {
        let text = TextFeaturePair::new(basis(4, 0), basis(4, 1)).unwrap();
        let (stack, params) = stack_of(&basis(4, 1), 3);
        let m = localize(&stack, &text, &params).unwrap();
        let e = 1f64.exp();
        for &v in m.values() {
            assert!((v - e / (1.0 + e)).abs() < 1e-12);
            assert!((v - 0.73106).abs() < 5e-6);
        }
    }

    #[test]
    fn map_in_unit_interval_and_stage_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let stack = random_stack(&mut rng, 4, [8; 4]);
        let text = random_text(&mut rng, 8);
        let params = DecoderParams::init([8; 4], 8, 0.07, 1).unwrap();
        let m = localize(&stack, &text, &params).unwrap();
        assert!(m.values().iter().all(|v| (0.0..=1.0).contains(v)));

        let perm = [2, 0, 3, 1];
        let stack2 = PatchFeatureStack::new(
            std::array::from_fn(|i| stack.stages[perm[i]].clone()),
            stack.final_feature.clone(),
        )
        .unwrap();
        let mut params2 = params.clone();
        params2.stages = std::array::from_fn(|i| params.stages[perm[i]].clone());
        let m2 = localize(&stack2, &text, &params2).unwrap();
        for (a, b) in m.values().iter().zip(m2.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_never_flips_the_winning_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stack = random_stack(&mut rng, 4, [8; 4]);
        let text = random_text(&mut rng, 8);
        let base = DecoderParams::init([8; 4], 8, 1.0, 2).unwrap();
        for (g, p) in stack.stages.iter().zip(&base.stages) {
            let proj = project_stage(g, p).unwrap();
            let reference = stage_probabilities(&proj, &text, 1.0);
            for t in [0.01, 0.07, 0.5, 3.0, 100.0] {
                let probs = stage_probabilities(&proj, &text, t);
                for (a, b) in reference.values().iter().zip(probs.values()) {
                    assert_eq!(a.partial_cmp(&0.5), b.partial_cmp(&0.5));
                }
            }
        }
    }

    #[test]
    fn localize_rejects_mismatched_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stack = random_stack(&mut rng, 4, [8; 4]);
        let params = DecoderParams::init([8, 8, 8, 9], 8, 0.07, 0).unwrap();
        let text = random_text(&mut rng, 8);
        assert!(localize(&stack, &text, &params).is_err());
        let params = DecoderParams::init([8; 4], 6, 0.07, 0).unwrap();
        assert!(localize(&stack, &text, &params).is_err());
    }

    #[test]
    fn loss_at_perfect_prediction() {
        let mask = Grid2D::from_fn(8, 8, |r, c| (r < 3 && c < 5) as u8 as f64);
        let w = LossWeights::default();
        assert!((decoder_loss(&mask, &mask, &w).unwrap() + 0.5).abs() < 1e-15);
        let zero = Grid2D::zeros(8, 8);
        assert_eq!(decoder_loss(&zero, &zero, &w).unwrap(), 0.0);
        assert!(decoder_loss(&zero, &Grid2D::filled(8, 8, 0.5), &w).is_err());
    }

    #[test]
    fn loss_matches_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = LossWeights {
            alpha: 1.0,
            beta: 0.7,
            delta: 1.3,
            gamma: 2.0,
        };
        for _ in 0..20 {
            let map = Grid2D::from_fn(4, 4, |_, _| rng.random_range(0.01..0.99));
            let mask = Grid2D::from_fn(4, 4, |_, _| rng.random_bool(0.4) as u8 as f64);
            let (m, y) = (map.values(), mask.values());
            let mut focal = 0.0;
            for i in 0..16 {
                let p = if y[i] == 1.0 { m[i] } else { 1.0 - m[i] };
                focal += (1.0 - p).powi(2) * p.ln();
            }
            focal = -focal / 16.0;
            let num: f64 = (0..16).map(|i| m[i] * y[i]).sum();
            let den: f64 = (0..16).map(|i| m[i] * m[i] + y[i] * y[i]).sum();
            let oracle = w.beta * focal + w.delta * (-num / den);
            let got = decoder_loss(&map, &mask, &w).unwrap();
            assert!((got - oracle).abs() < 1e-10);
        }
    }
}
