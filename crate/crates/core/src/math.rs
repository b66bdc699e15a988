//! Numerical primitives shared by every pipeline stage, and the three
//! training losses (token cross-entropy, focal, dice).
//!
//! All functions here are pure and deterministic: the summation order is
//! fixed so identical inputs give bit-identical outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to probabilities before taking a logarithm.
pub const PROB_EPS: f64 = 1e-12;

/// Norm below which a vector is treated as zero by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Row-major 2-D grid of finite reals. Used for anomaly maps and masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimension(format!(
                "grid must be at least 1x1, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::mismatch(
                "grid value count",
                height * width,
                values.len(),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDimension(format!(
                "grid value at index {i} is not finite"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Grid filled with a single value.
    ///
    /// Panics if either dimension is zero or `value` is not finite.
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "grid dims must be non-zero");
        assert!(value.is_finite());
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "grid dims must be non-zero");
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        assert!(values.iter().all(|v| v.is_finite()));
        Self {
            height,
            width,
            values,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid2D {
        Grid2D::from_fn(self.height, self.width, |r, c| f(self.get(r, c)))
    }

    /// True when every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub(crate) fn ensure_same_dims(&self, other: &Grid2D, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::mismatch(
                what,
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }
}

/// Weights of the combined objective `alpha*ce + beta*focal + delta*dice`,
/// and the focal focusing exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            delta: 1.0,
            gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.delta, self.gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// One axis of a bilinear resampling plan: for each target index, the two
/// source taps and the weight of the upper tap.
#[derive(Debug, Clone)]
struct AxisPlan {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisPlan {
    /// Align-corners mapping: target `t` samples source coordinate
    /// `t * (S - 1) / (T - 1)`.
    fn new(src: usize, dst: usize) -> Self {
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for t in 0..dst {
            let pos = if dst == 1 {
                0.0
            } else {
                (t * (src - 1)) as f64 / (dst - 1) as f64
            };
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(pos - i0 as f64);
        }
        Self { lo, hi, frac }
    }
}

/// Precomputed align-corners bilinear resampler between two fixed grid
/// sizes. Also exposes the adjoint, which the decoder needs to push
/// pixel gradients back onto the patch grid.
#[derive(Debug, Clone)]
pub struct Resampler {
    src: (usize, usize),
    dst: (usize, usize),
    rows: AxisPlan,
    cols: AxisPlan,
}

impl Resampler {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Result<Self> {
        if src.0 == 0 || src.1 == 0 || dst.0 == 0 || dst.1 == 0 {
            return Err(Error::InvalidDimension(format!(
                "resample {}x{} -> {}x{}",
                src.0, src.1, dst.0, dst.1
            )));
        }
        Ok(Self {
            src,
            dst,
            rows: AxisPlan::new(src.0, dst.0),
            cols: AxisPlan::new(src.1, dst.1),
        })
    }

    pub fn src_dims(&self) -> (usize, usize) {
        self.src
    }

    pub fn dst_dims(&self) -> (usize, usize) {
        self.dst
    }

    /// Resamples a row-major `src` buffer into a row-major `dst` buffer.
    pub fn apply_slice(&self, src: &[f64], out: &mut [f64]) {
        let (sh, sw) = self.src;
        let (dh, dw) = self.dst;
        assert_eq!(src.len(), sh * sw);
        assert_eq!(out.len(), dh * dw);
        if self.src == self.dst {
            out.copy_from_slice(src);
            return;
        }
        // horizontal pass once per source row, then blend row pairs
        let mut wide = vec![0.0; sh * dw];
        for (sr, wrow) in wide.chunks_exact_mut(dw).enumerate() {
            let srow = &src[sr * sw..(sr + 1) * sw];
            for (c, v) in wrow.iter_mut().enumerate() {
                let (c0, c1, fx) = (self.cols.lo[c], self.cols.hi[c], self.cols.frac[c]);
                *v = (1.0 - fx) * srow[c0] + fx * srow[c1];
            }
        }
        for (r, row) in out.chunks_exact_mut(dw).enumerate() {
            let (r0, r1, fy) = (self.rows.lo[r], self.rows.hi[r], self.rows.frac[r]);
            let top = &wide[r0 * dw..(r0 + 1) * dw];
            let bot = &wide[r1 * dw..(r1 + 1) * dw];
            for ((dstv, &a), &b) in row.iter_mut().zip(top).zip(bot) {
                *dstv = (1.0 - fy) * a + fy * b;
            }
        }
    }

    pub fn apply(&self, src: &Grid2D) -> Result<Grid2D> {
        if src.dims() != self.src {
            return Err(Error::mismatch(
                "resampler source",
                format!("{}x{}", self.src.0, self.src.1),
                format!("{}x{}", src.height(), src.width()),
            ));
        }
        let mut out = vec![0.0; self.dst.0 * self.dst.1];
        self.apply_slice(src.values(), &mut out);
        Grid2D::new(self.dst.0, self.dst.1, out)
    }

    /// Adjoint of [`Resampler::apply_slice`]: accumulates `grad_out`
    /// (target-sized) into `grad_src` (source-sized).
    pub fn adjoint_slice(&self, grad_out: &[f64], grad_src: &mut [f64]) {
        let (sh, sw) = self.src;
        let (dh, dw) = self.dst;
        assert_eq!(grad_out.len(), dh * dw);
        assert_eq!(grad_src.len(), sh * sw);
        if self.src == self.dst {
            for (g, o) in grad_src.iter_mut().zip(grad_out) {
                *g += o;
            }
            return;
        }
        for r in 0..dh {
            let (r0, r1, fy) = (self.rows.lo[r], self.rows.hi[r], self.rows.frac[r]);
            let row = &grad_out[r * dw..(r + 1) * dw];
            for (c, &g) in row.iter().enumerate() {
                let (c0, c1, fx) = (self.cols.lo[c], self.cols.hi[c], self.cols.frac[c]);
                let gt = (1.0 - fy) * g;
                let gb = fy * g;
                grad_src[r0 * sw + c0] += (1.0 - fx) * gt;
                grad_src[r0 * sw + c1] += fx * gt;
                grad_src[r1 * sw + c0] += (1.0 - fx) * gb;
                grad_src[r1 * sw + c1] += fx * gb;
            }
        }
    }
}

/// Bilinear upsampling with align-corners semantics.
///
/// The output is bounded by the source's min and max, and upsampling to the
/// source's own dims returns a bit-identical grid.
pub fn bilinear_upsample(src: &Grid2D, out_h: usize, out_w: usize) -> Result<Grid2D> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidDimension(format!(
            "upsample target must be non-zero, got {out_h}x{out_w}"
        )));
    }
    if out_h < src.height() || out_w < src.width() {
        return Err(Error::InvalidDimension(format!(
            "upsample target {out_h}x{out_w} is smaller than source {}x{}",
            src.height(),
            src.width()
        )));
    }
    Resampler::new(src.dims(), (out_h, out_w))?.apply(src)
}

/// Result of [`l2_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub vector: Vec<f64>,
    /// Set when the input norm was at or below [`NORM_EPS`]; `vector` is
    /// then all zeros.
    pub degenerate: bool,
}

pub fn l2_normalize(v: &[f64]) -> Normalized {
    let mut vector = v.to_vec();
    let degenerate = l2_normalize_in_place(&mut vector).is_none();
    Normalized { vector, degenerate }
}

/// Normalizes in place and returns the original norm, or zeroes the vector
/// and returns `None` when the norm is degenerate.
pub fn l2_normalize_in_place(v: &mut [f64]) -> Option<f64> {
    let norm = dot(v, v).sqrt();
    if norm > NORM_EPS && norm.is_finite() {
        let inv = 1.0 / norm;
        v.iter_mut().for_each(|x| *x *= inv);
        Some(norm)
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        None
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two-class softmax, stable for large logits.
pub fn softmax_pair(logit_normal: f64, logit_abnormal: f64) -> (f64, f64) {
    let m = logit_normal.max(logit_abnormal);
    let en = (logit_normal - m).exp();
    let ea = (logit_abnormal - m).exp();
    let s = en + ea;
    let p_abnormal = ea / s;
    (1.0 - p_abnormal, p_abnormal)
}

fn clamped_ln(p: f64, what: &str) -> f64 {
    if p < PROB_EPS {
        log::warn!("{what}: probability {p:e} clamped to {PROB_EPS:e}");
        PROB_EPS.ln()
    } else {
        p.ln()
    }
}

/// Token-level cross-entropy `-sum_i log p_i[label_i]`.
///
/// `predicted` holds one probability distribution per token and `labels`
/// the index of each token's true class.
pub fn cross_entropy_loss(predicted: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(Error::mismatch(
            "cross-entropy token count",
            predicted.len(),
            labels.len(),
        ));
    }
    let mut loss = 0.0;
    for (i, (probs, &label)) in predicted.iter().zip(labels).enumerate() {
        let p = *probs.get(label).ok_or_else(|| {
            Error::InvalidDimension(format!(
                "label {label} out of range for token {i} with {} classes",
                probs.len()
            ))
        })?;
        loss -= clamped_ln(p, "cross_entropy_loss");
    }
    Ok(loss)
}

/// Focal loss `-(1/n) sum (1-p)^gamma log p`, where `p` is each pixel's
/// predicted probability of its true class.
pub fn focal_loss(p_true: &Grid2D, gamma: f64) -> f64 {
    let n = p_true.len() as f64;
    let mut acc = 0.0;
    // small integer exponents (the usual gamma = 2) skip powf
    let int_gamma = (gamma.fract() == 0.0 && (0.0..=16.0).contains(&gamma)).then_some(gamma as i32);
    for &p in p_true.values() {
        let q = (1.0 - p).max(0.0);
        let w = match int_gamma {
            Some(k) => q.powi(k),
            None => q.powf(gamma),
        };
        acc += w * clamped_ln(p, "focal_loss");
    }
    -acc / n
}

/// Result of [`dice_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dice {
    pub value: f64,
    /// Both grids were all zero; `value` is 0 by convention.
    pub degenerate: bool,
}

/// Dice loss `-sum(y*t) / (sum(y^2) + sum(t^2))`, range `[-0.5, 0]`.
pub fn dice_loss(pred: &Grid2D, truth: &Grid2D) -> Result<Dice> {
    pred.ensure_same_dims(truth, "dice_loss grids")?;
    let (mut num, mut den) = (0.0, 0.0);
    for (&y, &t) in pred.values().iter().zip(truth.values()) {
        num += y * t;
        den += y * y + t * t;
    }
    if den == 0.0 {
        return Ok(Dice {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Dice {
        value: -num / den,
        degenerate: false,
    })
}

pub fn total_loss(ce: f64, focal: f64, dice: f64, w: &LossWeights) -> f64 {
    w.alpha * ce + w.beta * focal + w.delta * dice
}
