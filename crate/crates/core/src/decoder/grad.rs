//! Analytic gradients of the decoder loss.
//!
//! Chain, per sample, from the loss back to each stage's weights:
//!
//! ```text
//! L(M)  ->  dL/dM                      focal + dice, per pixel
//! M = 1/4 sum_s Up_s(P_s)  ->  dL/dP_s = 1/4 Up_s^T dL/dM
//! P = sigmoid((u . (t_a - t_n)) / tau)  ->  dL/du = dL/dP P(1-P)/tau (t_a - t_n)
//! u = z / |z|  ->  dL/dz = (dL/du - (dL/du . u) u) / |z|
//! z = W^T f + b  ->  dL/dW += f dL/dz^T,  dL/db += dL/dz
//! ```

use super::{DecoderParams, TrainItem};
use crate::error::{Error, Result};
use crate::features::{PatchFeatureStack, INPUT_SIZE, STAGES};
use crate::math::{dot, Grid2D, LossWeights, Resampler, PROB_EPS};
use crate::prompts::TextFeaturePair;

/// Mean loss over a batch and its gradient in parameter layout (the
/// temperature slot of `grads` is unused).
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub loss: f64,
    pub grads: DecoderParams,
}

struct StageCache {
    /// Unit projected vectors, `patches x C_text`.
    units: Vec<f64>,
    /// `|z|` per patch; 0 marks a degenerate patch.
    norms: Vec<f64>,
    probs: Vec<f64>,
    dims: (usize, usize),
}

fn forward_stage(
    grid: &crate::features::FeatureGrid,
    params: &super::StageParams,
    diff: &[f64],
    inv_t: f64,
) -> StageCache {
    let c = params.out_dim;
    let n = grid.patches();
    let mut units = vec![0.0; n * c];
    let mut norms = vec![0.0; n];
    let mut probs = vec![0.0; n];
    for k in 0..n {
        let z = &mut units[k * c..(k + 1) * c];
        params.affine(grid.patch(k), z);
        norms[k] = crate::math::l2_normalize_in_place(z).unwrap_or(0.0);
        // softmax over (normal, abnormal) reduces to a sigmoid of the gap
        let gap = dot(z, diff) * inv_t;
        probs[k] = sigmoid(gap);
    }
    StageCache {
        units,
        norms,
        probs,
        dims: (grid.height, grid.width),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss of one map against a binary mask and `dL/dM` per pixel.
pub fn map_loss_gradient(map: &Grid2D, mask: &Grid2D, w: &LossWeights) -> Result<(f64, Vec<f64>)> {
    map.ensure_same_dims(mask, "map vs mask")?;
    let n = map.len() as f64;
    let m = map.values();
    let y = mask.values();
    let mut grad = vec![0.0; m.len()];

    let (mut num, mut den) = (0.0, 0.0);
    for (&mi, &yi) in m.iter().zip(y) {
        num += mi * yi;
        den += mi * mi + yi * yi;
    }
    let dice = if den == 0.0 { 0.0 } else { -num / den };

    let gamma = w.gamma;
    let mut focal_acc = 0.0;
    for i in 0..m.len() {
        let positive = y[i] > 0.5;
        let q = if positive { m[i] } else { 1.0 - m[i] };
        let (ln_q, dln_q) = if q < PROB_EPS {
            (PROB_EPS.ln(), 0.0)
        } else {
            (q.ln(), 1.0 / q)
        };
        let one_minus = (1.0 - q).max(0.0);
        let (wt, dwt) = if gamma == 0.0 {
            (1.0, 0.0)
        } else {
            let wt = one_minus.powf(gamma);
            let dwt = if one_minus > 0.0 {
                -gamma * one_minus.powf(gamma - 1.0)
            } else {
                0.0
            };
            (wt, dwt)
        };
        focal_acc += wt * ln_q;
        // d/dq of -(1/n) w(q) ln q
        let dq = -(dwt * ln_q + wt * dln_q) / n;
        let dfocal = if positive { dq } else { -dq };
        let ddice = if den == 0.0 {
            0.0
        } else {
            -(y[i] * den - num * 2.0 * m[i]) / (den * den)
        };
        grad[i] = w.beta * dfocal + w.delta * ddice;
    }
    let focal = -focal_acc / n;
    Ok((w.beta * focal + w.delta * dice, grad))
}

/// Forward pass keeping what the backward pass needs; returns the map.
fn forward(
    stack: &PatchFeatureStack,
    params: &DecoderParams,
    diff: &[f64],
) -> Result<(Vec<StageCache>, Grid2D)> {
    let inv_t = 1.0 / params.temperature;
    let caches: Vec<StageCache> = stack
        .stages
        .iter()
        .zip(&params.stages)
        .map(|(g, p)| forward_stage(g, p, diff, inv_t))
        .collect();
    let maps = caches
        .iter()
        .map(|c| Grid2D::new(c.dims.0, c.dims.1, c.probs.clone()))
        .collect::<Result<Vec<_>>>()?;
    let map = super::average_upsampled(&maps)?;
    Ok((caches, map))
}

/// Adds this sample's gradient (scaled by `scale`) into `grads` and returns
/// its loss.
fn accumulate_sample(
    item: &TrainItem,
    text: &TextFeaturePair,
    params: &DecoderParams,
    w: &LossWeights,
    diff: &[f64],
    scale: f64,
    grads: &mut DecoderParams,
) -> Result<f64> {
    params.check_compat(&item.features, text)?;
    let (caches, map) = forward(&item.features, params, diff)?;
    let (loss, g_map) = map_loss_gradient(&map, &item.mask, w)?;
    let inv_t = 1.0 / params.temperature;
    let c = params.text_dim();
    let mut g_u = vec![0.0; c];
    for s in 0..STAGES {
        let cache = &caches[s];
        let grid = &item.features.stages[s];
        let rs = Resampler::new(cache.dims, (INPUT_SIZE, INPUT_SIZE))?;
        let mut g_p = vec![0.0; cache.probs.len()];
        rs.adjoint_slice(&g_map, &mut g_p);
        let gs = &mut grads.stages[s];
        for k in 0..grid.patches() {
            let norm = cache.norms[k];
            if norm == 0.0 {
                continue;
            }
            let p = cache.probs[k];
            let coef = scale * 0.25 * g_p[k] * p * (1.0 - p) * inv_t;
            if coef == 0.0 {
                continue;
            }
            let u = &cache.units[k * c..(k + 1) * c];
            for j in 0..c {
                g_u[j] = coef * diff[j];
            }
            let proj = dot(&g_u, u);
            let inv_norm = 1.0 / norm;
            for j in 0..c {
                g_u[j] = (g_u[j] - proj * u[j]) * inv_norm;
            }
            for (b, g) in gs.bias.iter_mut().zip(&g_u) {
                *b += g;
            }
            for (i, &f) in grid.patch(k).iter().enumerate() {
                let f = f as f64;
                if f == 0.0 {
                    continue;
                }
                let row = &mut gs.weight[i * c..(i + 1) * c];
                for (r, g) in row.iter_mut().zip(&g_u) {
                    *r += f * g;
                }
            }
        }
    }
    Ok(loss)
}

/// Exact gradient of the mean decoder loss over `batch` with respect to
/// every stage weight and bias. The temperature is held fixed.
pub fn loss_gradients(
    batch: &[TrainItem],
    text: &TextFeaturePair,
    params: &DecoderParams,
    w: &LossWeights,
) -> Result<GradientReport> {
    let refs: Vec<&TrainItem> = batch.iter().collect();
    batch_gradients(&refs, text, params, w)
}

pub(crate) fn batch_gradients(
    batch: &[&TrainItem],
    text: &TextFeaturePair,
    params: &DecoderParams,
    w: &LossWeights,
) -> Result<GradientReport> {
    if batch.is_empty() {
        return Err(Error::Empty("gradient batch".into()));
    }
    let diff: Vec<f64> = text
        .abnormal
        .iter()
        .zip(&text.normal)
        .map(|(a, n)| a - n)
        .collect();
    let mut grads = DecoderParams::zeros(params.stage_dims(), params.text_dim(), params.temperature);
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for item in batch {
        loss += accumulate_sample(item, text, params, w, &diff, scale, &mut grads)?;
    }
    Ok(GradientReport {
        loss: loss * scale,
        grads,
    })
}
