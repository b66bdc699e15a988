//! Gradient-domain blending: per channel, solve the discrete Poisson
//! equation on the interior of the destination rectangle with Dirichlet
//! values taken from the destination image.
//!
//! The rectangle's outermost ring is the boundary; the `(w-2) x (h-2)`
//! pixels inside it are unknowns. For an unknown `p` with neighbours `q`:
//!
//! ```text
//! 4 f_p - sum_{q interior} f_q = sum_{q on ring} dst_q + sum_q v_pq
//! ```
//!
//! which is symmetric positive definite, so conjugate gradient applies.

use serde::{Deserialize, Serialize};

use super::region::RegionSpec;
use crate::error::{Error, Result};
use crate::image::RgbImage;

/// How the guidance field is built from the two images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// Source gradients only (seamless cloning).
    Source,
    /// Per neighbour pair, the larger-magnitude of source and destination
    /// differences.
    #[default]
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Stop once `||r|| <= tol * ||b||`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

/// Convergence details of one blend, worst case over the three channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonReport {
    pub iterations: usize,
    /// `max |A u - b|` over interior unknowns, before clamping to `[0, 1]`.
    pub residual_inf: f64,
}

/// A channel system ready to solve. Exposed so that tests can build the same
/// system densely and compare.
#[derive(Debug, Clone)]
pub struct ChannelSystem {
    /// Interior width and height.
    pub nw: usize,
    pub nh: usize,
    pub rhs: Vec<f64>,
    /// Destination values on the interior, used as the initial guess.
    pub initial: Vec<f64>,
}

impl ChannelSystem {
    /// Applies the 5-point operator `4 x_p - sum interior neighbours`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let (nw, nh) = (self.nw, self.nh);
        for r in 0..nh {
            for c in 0..nw {
                let i = r * nw + c;
                let mut v = 4.0 * x[i];
                if r > 0 {
                    v -= x[i - nw];
                }
                if r + 1 < nh {
                    v -= x[i + nw];
                }
                if c > 0 {
                    v -= x[i - 1];
                }
                if c + 1 < nw {
                    v -= x[i + 1];
                }
                out[i] = v;
            }
        }
    }

    pub fn residual_inf(&self, x: &[f64]) -> f64 {
        let mut ax = vec![0.0; x.len()];
        self.apply(x, &mut ax);
        ax.iter()
            .zip(&self.rhs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Builds the linear system for one channel.
pub fn build_channel_system(
    dst: &RgbImage,
    src: &RgbImage,
    region: &RegionSpec,
    ch: usize,
    mode: BlendMode,
) -> ChannelSystem {
    let (nw, nh) = (region.w - 2, region.h - 2);
    let mut rhs = vec![0.0; nw * nh];
    let mut initial = vec![0.0; nw * nh];
    const NEIGHBOURS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    for r in 0..nh {
        for c in 0..nw {
            // rectangle-local coordinates of the unknown
            let (lr, lc) = (r + 1, c + 1);
            let (dr, dc) = (region.dy + lr, region.dx + lc);
            let (sr, sc) = (region.y0 + lr, region.x0 + lc);
            let dst_p = dst.get(dr, dc, ch);
            let src_p = src.get(sr, sc, ch);
            let mut b = 0.0;
            for (or, oc) in NEIGHBOURS {
                let (qr, qc) = ((lr as isize + or) as usize, (lc as isize + oc) as usize);
                let dst_q = dst.get(region.dy + qr, region.dx + qc, ch);
                let src_q = src.get(region.y0 + qr, region.x0 + qc, ch);
                let src_diff = src_p - src_q;
                b += match mode {
                    BlendMode::Source => src_diff,
                    BlendMode::Mixed => {
                        let dst_diff = dst_p - dst_q;
                        if dst_diff.abs() > src_diff.abs() {
                            dst_diff
                        } else {
                            src_diff
                        }
                    }
                };
                let on_ring = qr == 0 || qc == 0 || qr == region.h - 1 || qc == region.w - 1;
                if on_ring {
                    b += dst_q;
                }
            }
            rhs[r * nw + c] = b;
            initial[r * nw + c] = dst_p;
        }
    }
    ChannelSystem {
        nw,
        nh,
        rhs,
        initial,
    }
}

/// Conjugate gradient on the channel system, warm-started from the
/// destination values. Returns the solution and iteration count.
pub fn solve_cg(sys: &ChannelSystem, cfg: &SolverConfig) -> Result<(Vec<f64>, usize)> {
    let n = sys.rhs.len();
    let mut x = sys.initial.clone();
    let mut ax = vec![0.0; n];
    sys.apply(&x, &mut ax);
    let mut r: Vec<f64> = sys.rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let b_norm = norm(&sys.rhs);
    // an all-zero right-hand side only arises from an all-black neighbourhood
    let target = if b_norm > 0.0 { cfg.tol * b_norm } else { cfg.tol };
    let mut rr = dot(&r, &r);
    if rr.sqrt() <= target {
        return Ok((x, 0));
    }
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    for it in 1..=cfg.max_iter {
        sys.apply(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= target {
            return Ok((x, it));
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Err(Error::SolverDiverged {
        iterations: cfg.max_iter,
        residual: rr.sqrt() / b_norm.max(f64::MIN_POSITIVE),
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Poisson-blends `src`'s rectangle into `dst` at the region's destination.
pub fn poisson_blend(
    dst: &RgbImage,
    src: &RgbImage,
    region: &RegionSpec,
    mode: BlendMode,
    solver: &SolverConfig,
) -> Result<RgbImage> {
    poisson_blend_with_report(dst, src, region, mode, solver).map(|(img, _)| img)
}

pub fn poisson_blend_with_report(
    dst: &RgbImage,
    src: &RgbImage,
    region: &RegionSpec,
    mode: BlendMode,
    solver: &SolverConfig,
) -> Result<(RgbImage, PoissonReport)> {
    region.validate(src.dims(), dst.dims())?;
    if region.w < 3 || region.h < 3 {
        return Err(Error::InvalidDimension(format!(
            "Poisson region {}x{} has an empty interior",
            region.w, region.h
        )));
    }
    let mut out = dst.clone();
    let mut report = PoissonReport {
        iterations: 0,
        residual_inf: 0.0,
    };
    for ch in 0..3 {
        let sys = build_channel_system(dst, src, region, ch, mode);
        let (x, iters) = solve_cg(&sys, solver)?;
        report.iterations = report.iterations.max(iters);
        report.residual_inf = report.residual_inf.max(sys.residual_inf(&x));
        for r in 0..sys.nh {
            for c in 0..sys.nw {
                out.set(region.dy + r + 1, region.dx + c + 1, ch, x[r * sys.nw + c]);
            }
        }
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize, seed: u64) -> RgbImage {
        let s = seed as f64;
        RgbImage::from_fn(h, w, |r, c| {
            let (x, y) = (c as f64, r as f64);
            [
                0.5 + 0.4 * (0.7 * x + 0.3 * y + s).sin(),
                0.5 + 0.3 * (0.2 * x - 0.9 * y + 2.0 * s).cos(),
                0.5 + 0.2 * ((x * y * 0.05) + s).sin(),
            ]
        })
        .unwrap()
    }

    /// Dense Gaussian elimination with partial pivoting.
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for k in 0..n {
            let piv = (k..n)
                .max_by(|&i, &j| a[i][k].abs().partial_cmp(&a[j][k].abs()).unwrap())
                .unwrap();
            a.swap(k, piv);
            b.swap(k, piv);
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                if f != 0.0 {
                    for j in k..n {
                        a[i][j] -= f * a[k][j];
                    }
                    b[i] -= f * b[k];
                }
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
            x[i] = (b[i] - s) / a[i][i];
        }
        x
    }

    fn dense_matrix(nw: usize, nh: usize) -> Vec<Vec<f64>> {
        let n = nw * nh;
        let mut a = vec![vec![0.0; n]; n];
        for r in 0..nh {
            for c in 0..nw {
                let i = r * nw + c;
                a[i][i] = 4.0;
                if r > 0 {
                    a[i][i - nw] = -1.0;
                }
                if r + 1 < nh {
                    a[i][i + nw] = -1.0;
                }
                if c > 0 {
                    a[i][i - 1] = -1.0;
                }
                if c + 1 < nw {
                    a[i][i + 1] = -1.0;
                }
            }
        }
        a
    }

    #[test]
    fn identical_region_is_fixed_point() {
        let img = textured(32, 32, 3);
        let region = RegionSpec { x0: 5, y0: 6, w: 12, h: 10, dx: 5, dy: 6 };
        for mode in [BlendMode::Source, BlendMode::Mixed] {
            let (out, rep) =
                poisson_blend_with_report(&img, &img, &region, mode, &SolverConfig::default())
                    .unwrap();
            assert!(rep.residual_inf < 1e-12);
            for (a, b) in out.data().iter().zip(img.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_into_equal_constant_is_unchanged() {
        let img = RgbImage::filled(16, 16, [0.3, 0.6, 0.9]).unwrap();
        let region = RegionSpec { x0: 0, y0: 0, w: 8, h: 8, dx: 4, dy: 5 };
        let out = poisson_blend(&img, &img, &region, BlendMode::Source, &SolverConfig::default())
            .unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_matches_dense_solve() {
        let dst = textured(24, 24, 1);
        let src = textured(24, 24, 7);
        // 10x10 rectangle -> 8x8 interior
        let region = RegionSpec { x0: 3, y0: 9, w: 10, h: 10, dx: 11, dy: 2 };
        for mode in [BlendMode::Source, BlendMode::Mixed] {
            for ch in 0..3 {
                let sys = build_channel_system(&dst, &src, &region, ch, mode);
                let (x, _) = solve_cg(&sys, &SolverConfig::default()).unwrap();
                let exact = dense_solve(dense_matrix(sys.nw, sys.nh), sys.rhs.clone());
                let err = x.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-5, "max-abs error {err}");
                assert!(sys.residual_inf(&x) <= 1e-6);
            }
        }
    }

    #[test]
    fn boundary_ring_equals_destination() {
        let dst = textured(40, 40, 2);
        let src = textured(40, 40, 9);
        let region = RegionSpec { x0: 2, y0: 3, w: 15, h: 11, dx: 20, dy: 25 };
        let out = poisson_blend(&dst, &src, &region, BlendMode::Mixed, &SolverConfig::default())
            .unwrap();
        for r in 0..40 {
            for c in 0..40 {
                let interior = r > region.dy
                    && r < region.dy + region.h - 1
                    && c > region.dx
                    && c < region.dx + region.w - 1;
                if !interior {
                    assert_eq!(out.pixel(r, c), dst.pixel(r, c));
                }
            }
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        let dst = textured(40, 40, 2);
        let src = textured(40, 40, 5);
        let region = RegionSpec { x0: 0, y0: 0, w: 30, h: 30, dx: 5, dy: 5 };
        let cfg = SolverConfig { tol: 1e-14, max_iter: 2 };
        match poisson_blend(&dst, &src, &region, BlendMode::Source, &cfg) {
            Err(Error::SolverDiverged { iterations, residual }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 0.0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_thin_region() {
        let img = textured(20, 20, 0);
        let region = RegionSpec { x0: 0, y0: 0, w: 2, h: 10, dx: 0, dy: 0 };
        assert!(poisson_blend(&img, &img, &region, BlendMode::Source, &SolverConfig::default())
            .is_err());
    }
}
