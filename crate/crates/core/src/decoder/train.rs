//! Plain SGD over the decoder parameters with linear warm-up followed by a
//! cosine decay.

use std::f64::consts::PI;
use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grad::batch_gradients;
use super::{DecoderParams, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::features::{FeatureGrid, FeatureSource, PatchFeatureStack, INPUT_SIZE, STAGES};
use crate::image::resize_mask;
use crate::math::{Grid2D, LossWeights};
use crate::prompts::TextFeaturePair;
use crate::simulation::AnomalySample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of all optimizer steps spent in linear warm-up.
    pub warmup_fraction: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub temperature: f64,
    /// Run SGD on per-channel standardized stage features and fold the
    /// statistics back into the returned weights.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            warmup_fraction: 0.1,
            seed: 0,
            loss: LossWeights::default(),
            temperature: DEFAULT_TEMPERATURE,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        self.loss.validate()
    }
}

/// Learning rate at optimizer step `step` (0-based) of `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let total = total_steps.max(1);
    let warm = (cfg.warmup_fraction * total as f64).ceil() as usize;
    if step < warm {
        return cfg.lr * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let t = (step - warm) as f64 / span;
    cfg.lr * 0.5 * (1.0 + (PI * t).cos())
}

/// Per-stage, per-channel mean and scale of training features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStandardizer {
    pub mean: [Vec<f64>; STAGES],
    pub scale: [Vec<f64>; STAGES],
}

impl FeatureStandardizer {
    /// Statistics over every patch of every item. Channels with (near) zero
    /// spread keep scale 1.
    pub fn fit(items: &[TrainItem]) -> Self {
        let stats = |s: usize| {
            let c = items[0].features.stages[s].channels;
            let mut sum = vec![0.0; c];
            let mut sq = vec![0.0; c];
            let mut n = 0.0;
            for item in items {
                for patch in item.features.stages[s].data.chunks_exact(c) {
                    for (j, &v) in patch.iter().enumerate() {
                        sum[j] += v as f64;
                        sq[j] += (v as f64) * (v as f64);
                    }
                    n += 1.0;
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let scale = sq
                .iter()
                .zip(&mean)
                .map(|(q, m)| {
                    let sd = (q / n - m * m).max(0.0).sqrt();
                    if sd > 1e-8 {
                        sd
                    } else {
                        1.0
                    }
                })
                .collect();
            (mean, scale)
        };
        let all: Vec<(Vec<f64>, Vec<f64>)> = (0..STAGES).map(stats).collect();
        Self {
            mean: std::array::from_fn(|s| all[s].0.clone()),
            scale: std::array::from_fn(|s| all[s].1.clone()),
        }
    }

    pub fn apply(&self, stack: &PatchFeatureStack) -> Result<PatchFeatureStack> {
        let stages = std::array::from_fn(|s| {
            let g = &stack.stages[s];
            let c = g.channels;
            let data = g
                .data
                .chunks_exact(c)
                .flat_map(|p| {
                    p.iter()
                        .enumerate()
                        .map(move |(j, &v)| ((v as f64 - self.mean[s][j]) / self.scale[s][j]) as f32)
                })
                .collect();
            FeatureGrid {
                height: g.height,
                width: g.width,
                channels: c,
                data,
            }
        });
        PatchFeatureStack::new(stages, stack.final_feature.clone())
    }

    /// Parameters acting on raw features that reproduce `params` acting on
    /// standardized ones: `W = diag(1/s) V`, `b = c - W^T m`.
    pub fn fold(&self, params: &DecoderParams) -> DecoderParams {
        let mut out = params.clone();
        for (s, st) in out.stages.iter_mut().enumerate() {
            let c = st.out_dim;
            for i in 0..st.in_dim {
                let inv = 1.0 / self.scale[s][i];
                for w in &mut st.weight[i * c..(i + 1) * c] {
                    *w *= inv;
                }
            }
            for i in 0..st.in_dim {
                let m = self.mean[s][i];
                for j in 0..c {
                    st.bias[j] -= st.weight[i * c + j] * m;
                }
            }
        }
        out
    }
}

/// One training example: cached features and a 224x224 binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub features: PatchFeatureStack,
    pub mask: Grid2D,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    /// Mean of the batch losses seen during the epoch.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: DecoderParams,
    pub trace: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("epoch,lr,loss\n");
        for r in &self.trace {
            let _ = writeln!(s, "{},{:.9e},{:.9}", r.epoch, r.lr, r.loss);
        }
        s
    }

    pub fn final_loss(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.loss)
    }
}

/// Trains from `init` on pre-extracted features. Returns the parameters
/// after the last step together with the per-epoch loss trace.
///
/// With `standardize`, `init` is interpreted in standardized coordinates and
/// the returned parameters are folded back to act on raw features.
pub fn train_on_features(
    items: &[TrainItem],
    text: &TextFeaturePair,
    init: DecoderParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    init.validate()?;
    for item in items {
        init.check_compat(&item.features, text)?;
        if item.mask.dims() != (INPUT_SIZE, INPUT_SIZE) || !item.mask.is_binary() {
            return Err(Error::InvalidDimension(format!(
                "training masks must be binary {INPUT_SIZE}x{INPUT_SIZE}"
            )));
        }
    }

    let standardizer = cfg.standardize.then(|| FeatureStandardizer::fit(items));
    let owned;
    let items = match &standardizer {
        Some(st) => {
            owned = items
                .iter()
                .map(|it| {
                    Ok(TrainItem {
                        features: st.apply(&it.features)?,
                        mask: it.mask.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            &owned[..]
        }
        None => items,
    };

    let mut params = init;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let steps_per_epoch = items.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| &items[i]));
            let rep = batch_gradients(&batch, text, &params, &cfg.loss)?;
            if !rep.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("batch loss {} over items {chunk:?}", rep.loss),
                });
            }
            if let Some(bad) = rep.grads.flat().iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!("gradient entry {bad} is not finite"),
                });
            }
            lr = lr_at(step, total, cfg);
            params.axpy(-lr, &rep.grads);
            loss_sum += rep.loss;
            step += 1;
        }
        let loss = loss_sum / steps_per_epoch as f64;
        debug!("epoch {epoch}: lr {lr:.3e} loss {loss:.6}");
        trace.push(EpochRecord { epoch, lr, loss });
    }
    info!(
        "trained {} epochs on {} items, final loss {:.6}",
        cfg.epochs,
        items.len(),
        trace.last().map_or(f64::NAN, |r| r.loss)
    );
    if let Some(st) = &standardizer {
        params = st.fold(&params);
    }
    Ok(TrainOutcome { params, trace })
}

/// Extracts features for every sample, then trains from a seeded
/// initialization. Normal images enter as samples with an empty mask.
pub fn train_decoder(
    dataset: &[AnomalySample],
    source: &FeatureSource,
    text: &TextFeaturePair,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset".into()));
    }
    if !dataset.iter().any(AnomalySample::is_anomalous) || dataset.iter().all(AnomalySample::is_anomalous) {
        return Err(Error::Degenerate(
            "training dataset needs both anomalous and normal samples".into(),
        ));
    }
    let items = dataset
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let features = source.features(&s.image, &format!("{}_{i}", s.category))?;
            let mask = resize_mask(&s.mask, INPUT_SIZE, INPUT_SIZE);
            Ok(TrainItem { features, mask })
        })
        .collect::<Result<Vec<_>>>()?;
    let init = DecoderParams::init(
        items[0].features.stage_dims(),
        text.dim(),
        cfg.temperature,
        cfg.seed,
    )?;
    train_on_features(&items, text, init, cfg)
}
