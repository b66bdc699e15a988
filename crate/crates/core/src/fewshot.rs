//! Few-shot localization against a memory bank of normal patch features.
//!
//! Each query patch is scored by one minus its best cosine similarity to the
//! bank of the same stage; stage maps are upsampled and averaged.

use std::fs;
use std::path::Path;

use crate::decoder::average_upsampled;
use crate::error::{Error, FormatError, Result};
use crate::features::{push_f32s, ByteReader, FeatureGrid, PatchFeatureStack, STAGES};
use crate::math::{dot, l2_normalize_in_place, Grid2D};

pub const MBK_MAGIC: &[u8; 4] = b"MBK1";

const QUERY_BLOCK: usize = 32;
const BANK_BLOCK: usize = 256;

/// Unit-norm patch vectors of one stage, row-major `count x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct BankStage {
    pub count: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    /// Rows whose input had zero norm; stored as zero vectors.
    pub degenerate: Vec<bool>,
}

impl BankStage {
    fn from_rows(dim: usize, mut data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::InvalidDimension(format!(
                "bank stage of {} values with dim {dim}",
                data.len()
            )));
        }
        let count = data.len() / dim;
        let degenerate = data
            .chunks_exact_mut(dim)
            .map(|row| l2_normalize_in_place(row).is_none())
            .collect();
        Ok(Self {
            count,
            dim,
            data,
            degenerate,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            count: idx.len(),
            dim: self.dim,
            data,
            degenerate: idx.iter().map(|&i| self.degenerate[i]).collect(),
        }
    }

    /// Best cosine similarity against the bank for each unit-norm query row.
    /// Exact brute force, blocked over queries and bank rows.
    pub fn max_similarity(&self, queries: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let nq = queries.len() / d;
        let mut best = vec![f64::NEG_INFINITY; nq];
        for q0 in (0..nq).step_by(QUERY_BLOCK) {
            let q1 = (q0 + QUERY_BLOCK).min(nq);
            for b0 in (0..self.count).step_by(BANK_BLOCK) {
                let b1 = (b0 + BANK_BLOCK).min(self.count);
                let block = &self.data[b0 * d..b1 * d];
                for (q, slot) in best[q0..q1].iter_mut().enumerate() {
                    let qv = &queries[(q0 + q) * d..(q0 + q + 1) * d];
                    for row in block.chunks_exact(d) {
                        let s = dot(qv, row);
                        if s > *slot {
                            *slot = s;
                        }
                    }
                }
            }
        }
        best
    }
}

/// Per-stage banks plus the ids of the images they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub stages: [BankStage; STAGES],
    pub sources: Vec<String>,
}

impl MemoryBank {
    pub fn sizes(&self) -> [usize; STAGES] {
        std::array::from_fn(|i| self.stages[i].count)
    }

    pub fn dims(&self) -> [usize; STAGES] {
        std::array::from_fn(|i| self.stages[i].dim)
    }

    pub fn with_sources(mut self, sources: Vec<String>) -> Self {
        self.sources = sources;
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.stages.iter().map(|s| s.data.len()).sum();
        let mut out = Vec::with_capacity(8 + 8 * STAGES + 4 * payload);
        out.extend_from_slice(MBK_MAGIC);
        out.extend_from_slice(&(STAGES as u32).to_le_bytes());
        for s in &self.stages {
            out.extend_from_slice(&(s.count as u32).to_le_bytes());
            out.extend_from_slice(&(s.dim as u32).to_le_bytes());
        }
        for s in &self.stages {
            push_f32s(&mut out, s.data.iter().map(|&v| v as f32));
        }
        out
    }

    /// Rows are re-normalized on load; source ids are not part of the file.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(bytes);
        rd.magic(MBK_MAGIC)?;
        let count = rd.u32("stage_count")? as usize;
        if count != STAGES {
            return Err(FormatError::DimMismatch {
                field: "stage_count".into(),
                detail: format!("expected {STAGES}, found {count}"),
            }
            .into());
        }
        let mut dims = [(0usize, 0usize); STAGES];
        for (i, d) in dims.iter_mut().enumerate() {
            let n = rd.u32(&format!("stage {i} rows"))? as usize;
            let c = rd.u32(&format!("stage {i} dim"))? as usize;
            if n == 0 || c == 0 {
                return Err(FormatError::DimMismatch {
                    field: format!("stage {i} header"),
                    detail: format!("{n}x{c} has a zero dimension"),
                }
                .into());
            }
            *d = (n, c);
        }
        let mut stages = Vec::with_capacity(STAGES);
        for (i, &(n, c)) in dims.iter().enumerate() {
            let field = format!("stage {i} payload");
            let vals = rd.f32s(n * c, &field)?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(FormatError::NonFinite { field }.into());
            }
            stages.push(BankStage::from_rows(c, vals.into_iter().map(f64::from).collect())?);
        }
        rd.finish("stage 3 payload")?;
        Ok(Self {
            stages: stages.try_into().expect("four stages"),
            sources: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Greedy farthest-point selection under cosine distance over unit rows.
/// Starts from row 0; each step adds the row whose nearest selected row is
/// farthest, ties going to the lowest index.
pub fn farthest_point_indices(data: &[f64], dim: usize, target: usize) -> Vec<usize> {
    let n = data.len() / dim;
    let target = target.min(n);
    if target == 0 {
        return Vec::new();
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut chosen = vec![0usize];
    let mut min_dist: Vec<f64> = (0..n).map(|i| 1.0 - dot(row(i), row(0))).collect();
    min_dist[0] = f64::NEG_INFINITY;
    while chosen.len() < target {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        chosen.push(best);
        let new = row(best);
        for (i, d) in min_dist.iter_mut().enumerate() {
            if *d == f64::NEG_INFINITY {
                continue;
            }
            *d = d.min(1.0 - dot(row(i), new));
        }
        min_dist[best] = f64::NEG_INFINITY;
    }
    chosen
}

/// Pools every patch of every stack per stage, L2-normalizes, and keeps
/// `ceil(fraction * N)` rows by farthest-point selection when
/// `coreset_fraction < 1`.
pub fn build_memory_bank(stacks: &[PatchFeatureStack], coreset_fraction: f64) -> Result<MemoryBank> {
    if stacks.is_empty() {
        return Err(Error::Empty("memory bank needs at least one feature stack".into()));
    }
    if !(coreset_fraction > 0.0 && coreset_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "coreset_fraction must lie in (0, 1], got {coreset_fraction}"
        )));
    }
    let dims = stacks[0].stage_dims();
    for (j, s) in stacks.iter().enumerate() {
        if s.stage_dims() != dims {
            return Err(Error::mismatch(
                format!("stack {j} stage dims"),
                format!("{dims:?}"),
                format!("{:?}", s.stage_dims()),
            ));
        }
    }
    let mut stages = Vec::with_capacity(STAGES);
    for (i, &dim) in dims.iter().enumerate() {
        let data: Vec<f64> = stacks
            .iter()
            .flat_map(|s| s.stages[i].data.iter().map(|&v| v as f64))
            .collect();
        let full = BankStage::from_rows(dim, data)?;
        let stage = if coreset_fraction < 1.0 {
            let target = ((coreset_fraction * full.count as f64).ceil() as usize).max(1);
            let mut idx = farthest_point_indices(&full.data, dim, target);
            idx.sort_unstable();
            full.select(&idx)
        } else {
            full
        };
        stages.push(stage);
    }
    Ok(MemoryBank {
        stages: stages.try_into().expect("four stages"),
        sources: (0..stacks.len()).map(|i| i.to_string()).collect(),
    })
}

/// `1 - max cosine` per patch of one stage.
pub fn stage_scores(grid: &FeatureGrid, bank: &BankStage) -> Result<Grid2D> {
    if grid.channels != bank.dim {
        return Err(Error::mismatch("bank stage dim", bank.dim, grid.channels));
    }
    let mut queries: Vec<f64> = grid.data.iter().map(|&v| v as f64).collect();
    for row in queries.chunks_exact_mut(bank.dim) {
        l2_normalize_in_place(row);
    }
    let sims = bank.max_similarity(&queries);
    Grid2D::new(grid.height, grid.width, sims.into_iter().map(|s| 1.0 - s).collect())
}

/// Anomaly map at 224x224: mean over stages of upsampled scores, clamped to
/// `[0, 1]`.
pub fn localize_fewshot(stack: &PatchFeatureStack, bank: &MemoryBank) -> Result<Grid2D> {
    let maps = stack
        .stages
        .iter()
        .zip(&bank.stages)
        .map(|(g, b)| stage_scores(g, b))
        .collect::<Result<Vec<_>>>()?;
    average_upsampled(&maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::INPUT_SIZE;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stack_from(g: usize, c: usize, f: impl Fn(usize, usize) -> Vec<f32>) -> PatchFeatureStack {
        let stages = std::array::from_fn(|s| {
            let data = (0..g * g).flat_map(|k| f(s, k)).collect();
            FeatureGrid::new(g, g, c, data).unwrap()
        });
        PatchFeatureStack::new(stages, vec![1.0; 4]).unwrap()
    }

    fn random_stack(rng: &mut ChaCha8Rng, g: usize, c: usize) -> PatchFeatureStack {
        let vals: Vec<Vec<f32>> = (0..STAGES * g * g)
            .map(|_| (0..c).map(|_| rng.random::<f32>() - 0.5).collect())
            .collect();
        stack_from(g, c, |s, k| vals[s * g * g + k].clone())
    }

    fn basis(c: usize, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; c];
        v[i] = 1.0;
        v
    }

    #[test]
    fn counts_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_stack(&mut rng, 16, 8);
        let a = build_memory_bank(std::slice::from_ref(&s), 1.0).unwrap();
        assert_eq!(a.sizes(), [256; 4]);
        assert_eq!(a, build_memory_bank(std::slice::from_ref(&s), 1.0).unwrap());
        let half = build_memory_bank(&[s], 0.5).unwrap();
        assert_eq!(half.sizes(), [128; 4]);
        assert!(build_memory_bank(&[], 1.0).is_err());
    }

    /// Recomputes the min-distance to the chosen set from scratch each step.
    fn naive_farthest(rows: &[Vec<f64>], target: usize) -> Vec<usize> {
        let dist = |a: &[f64], b: &[f64]| 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut chosen = vec![0];
        while chosen.len() < target {
            let mut best = (f64::NEG_INFINITY, 0);
            for i in 0..rows.len() {
                if chosen.contains(&i) {
                    continue;
                }
                let d = chosen
                    .iter()
                    .map(|&j| dist(&rows[i], &rows[j]))
                    .fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            chosen.push(best.1);
        }
        chosen
    }

    #[test]
    fn coreset_matches_exhaustive_oracle() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base: Vec<Vec<f64>> = (0..8)
                .map(|_| (0..6).map(|_| rng.random::<f64>() - 0.5).collect())
                .collect();
            // duplicated-then-perturbed
            let mut rows: Vec<Vec<f64>> = base
                .iter()
                .chain(&base)
                .map(|r| r.iter().map(|v| v + 1e-3 * (rng.random::<f64>() - 0.5)).collect())
                .collect();
            for r in &mut rows {
                l2_normalize_in_place(r);
            }
            let flat: Vec<f64> = rows.concat();
            let target = 8;
            assert_eq!(farthest_point_indices(&flat, 6, target), naive_farthest(&rows, target));
        }
    }

    #[test]
    fn self_match_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_stack(&mut rng, 8, 16);
        let other = random_stack(&mut rng, 8, 16);
        let bank = build_memory_bank(&[other, s.clone()], 1.0).unwrap();
        let m = localize_fewshot(&s, &bank).unwrap();
        assert_eq!(m.dims(), (INPUT_SIZE, INPUT_SIZE));
        assert!(m.max() <= 1e-12, "max {}", m.max());
    }

    #[test]
    fn orthogonal_query_scores_one() {
        let bank = build_memory_bank(&[stack_from(2, 4, |_, _| basis(4, 0))], 1.0).unwrap();
        let q = stack_from(2, 4, |_, _| basis(4, 1));
        let m = localize_fewshot(&q, &bank).unwrap();
        assert!(m.values().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn diagonal_query_closed_form() {
        let bank = build_memory_bank(&[stack_from(2, 4, |_, _| basis(4, 0))], 1.0).unwrap();
        let q = stack_from(2, 4, |_, _| vec![1.0, 1.0, 0.0, 0.0]);
        let m = localize_fewshot(&q, &bank).unwrap();
        let expected = 1.0 - std::f64::consts::FRAC_1_SQRT_2;
        assert!((expected - 0.29289).abs() < 1e-5);
        assert!(m.values().iter().all(|&v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn opposite_vectors_clamp_to_one() {
        let bank = build_memory_bank(&[stack_from(2, 4, |_, _| basis(4, 0))], 1.0).unwrap();
        let q = stack_from(2, 4, |_, _| vec![-1.0, 0.0, 0.0, 0.0]);
        let m = localize_fewshot(&q, &bank).unwrap();
        assert!(m.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let bank = build_memory_bank(&[stack_from(2, 4, |_, _| basis(4, 0))], 1.0).unwrap();
        let q = stack_from(2, 3, |_, _| basis(3, 0));
        assert!(matches!(localize_fewshot(&q, &bank), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn blocked_search_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 5;
        let rows: Vec<f64> = (0..(BANK_BLOCK + 37) * dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let stage = BankStage::from_rows(dim, rows).unwrap();
        let mut q: Vec<f64> = (0..(QUERY_BLOCK + 3) * dim).map(|_| rng.random::<f64>() - 0.5).collect();
        for r in q.chunks_exact_mut(dim) {
            l2_normalize_in_place(r);
        }
        let got = stage.max_similarity(&q);
        for (i, qr) in q.chunks_exact(dim).enumerate() {
            let naive = (0..stage.count)
                .map(|j| dot(qr, stage.row(j)))
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(got[i], naive);
        }
    }

    #[test]
    fn mbk_round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = build_memory_bank(&[random_stack(&mut rng, 4, 6)], 1.0).unwrap();
        let bytes = bank.to_bytes();
        assert_eq!(&bytes[..4], b"MBK1");
        let back = MemoryBank::from_bytes(&bytes).unwrap();
        assert_eq!(back.sizes(), bank.sizes());
        for (a, b) in back.stages.iter().zip(&bank.stages) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        assert_eq!(back.to_bytes(), bytes);
        let mut bad = bytes.clone();
        bad[3] = b'2';
        assert!(matches!(
            MemoryBank::from_bytes(&bad),
            Err(Error::Format(FormatError::UnsupportedVersion { .. }))
        ));
        assert!(matches!(
            MemoryBank::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bank.mbk1");
        bank.save(&p).unwrap();
        assert_eq!(MemoryBank::load(&p).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn stage_averaging_preserves_pixel_order() {
        // nonnegative features keep every cosine in [0, 1], so no clamp ties
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pos = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..4).map(|_| rng.random::<f32>()).collect() };
        let bank_vals: Vec<Vec<f32>> = (0..4).map(|_| pos(&mut rng)).collect();
        let q_vals: Vec<Vec<f32>> = (0..4).map(|_| pos(&mut rng)).collect();
        let bank = build_memory_bank(&[stack_from(2, 4, |_, k| bank_vals[k].clone())], 1.0).unwrap();
        let q = stack_from(2, 4, |_, k| q_vals[k].clone());
        let m = localize_fewshot(&q, &bank).unwrap();
        let raw: Vec<f64> = {
            let maps: Vec<Grid2D> = q
                .stages
                .iter()
                .zip(&bank.stages)
                .map(|(g, b)| crate::math::bilinear_upsample(&stage_scores(g, b).unwrap(), INPUT_SIZE, INPUT_SIZE).unwrap())
                .collect();
            (0..m.len()).map(|i| maps.iter().map(|g| g.values()[i]).sum()).collect()
        };
        for i in (0..m.len()).step_by(97) {
            for j in (0..m.len()).step_by(89) {
                if raw[i] < raw[j] - 1e-12 {
                    assert!(m.values()[i] < m.values()[j]);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn adding_to_the_bank_never_raises_scores(seed in any::<u64>(), extra in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = random_stack(&mut rng, 2, 3);
            let more: Vec<_> = (0..extra).map(|_| random_stack(&mut rng, 2, 3)).collect();
            let q = random_stack(&mut rng, 2, 3);
            let small = build_memory_bank(std::slice::from_ref(&base), 1.0).unwrap();
            let mut all = vec![base];
            all.extend(more);
            let big = build_memory_bank(&all, 1.0).unwrap();
            for s in 0..STAGES {
                let a = stage_scores(&q.stages[s], &small.stages[s]).unwrap();
                let b = stage_scores(&q.stages[s], &big.stages[s]).unwrap();
                for (x, y) in a.values().iter().zip(b.values()) {
                    prop_assert!(y <= x);
                }
            }
            let m = localize_fewshot(&q, &big).unwrap();
            prop_assert!(m.min() >= 0.0 && m.max() <= 1.0);
        }
    }
}
