use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Source rectangle and destination offset of one pasted patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionSpec {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub dx: usize,
    pub dy: usize,
}

impl RegionSpec {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    /// Checks that the rectangle lies inside the source and its translation
    /// inside the destination.
    pub fn validate(&self, src_dims: (usize, usize), dst_dims: (usize, usize)) -> Result<()> {
        let (sh, sw) = src_dims;
        let (dh, dw) = dst_dims;
        if self.area() < 16 {
            return Err(Error::Config(format!(
                "region {}x{} is smaller than 16 pixels",
                self.w, self.h
            )));
        }
        if self.x0 + self.w > sw || self.y0 + self.h > sh {
            return Err(Error::Config(format!(
                "region {self:?} exceeds source image {sh}x{sw}"
            )));
        }
        if self.dx + self.w > dw || self.dy + self.h > dh {
            return Err(Error::Config(format!(
                "region {self:?} exceeds destination image {dh}x{dw}"
            )));
        }
        Ok(())
    }

    /// Whether destination pixel `(row, col)` lies in the pasted rectangle.
    #[inline]
    pub fn contains_dst(&self, row: usize, col: usize) -> bool {
        row >= self.dy && row < self.dy + self.h && col >= self.dx && col < self.dx + self.w
    }
}

/// Size and aspect bounds for region sampling. Area fractions are relative
/// to the destination image; aspect is width / height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    pub min_frac: f64,
    pub max_frac: f64,
    pub min_aspect: f64,
    pub max_aspect: f64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            min_frac: 0.005,
            max_frac: 0.05,
            min_aspect: 0.3,
            max_aspect: 3.3,
        }
    }
}

/// Smallest side accepted, so that every region has a non-empty interior
/// for the Poisson solve.
const MIN_REGION_SIDE: usize = 3;

/// Draws a region deterministically from `seed`.
///
/// All integer `(w, h)` pairs satisfying the bounds are enumerated; a width
/// is drawn uniformly among feasible widths, then a height uniformly among
/// the heights feasible for it, then both positions uniformly.
pub fn sample_region(
    seed: u64,
    src_dims: (usize, usize),
    dst_dims: (usize, usize),
    cfg: &RegionConfig,
) -> Result<RegionSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_region_with(&mut rng, src_dims, dst_dims, cfg)
}

pub(crate) fn sample_region_with<R: Rng>(
    rng: &mut R,
    src_dims: (usize, usize),
    dst_dims: (usize, usize),
    cfg: &RegionConfig,
) -> Result<RegionSpec> {
    let feasible = feasible_sizes(src_dims, dst_dims, cfg)?;
    let (w, h_lo, h_hi) = feasible[rng.random_range(0..feasible.len())];
    let h = rng.random_range(h_lo..=h_hi);
    let (sh, sw) = src_dims;
    let (dh, dw) = dst_dims;
    let region = RegionSpec {
        x0: rng.random_range(0..=sw - w),
        y0: rng.random_range(0..=sh - h),
        w,
        h,
        dx: rng.random_range(0..=dw - w),
        dy: rng.random_range(0..=dh - h),
    };
    debug_assert!(region.validate(src_dims, dst_dims).is_ok());
    Ok(region)
}

/// Feasible widths with their inclusive height ranges.
fn feasible_sizes(
    src_dims: (usize, usize),
    dst_dims: (usize, usize),
    cfg: &RegionConfig,
) -> Result<Vec<(usize, usize, usize)>> {
    let bad = |msg: String| Err(Error::Config(msg));
    if !(cfg.min_frac > 0.0 && cfg.min_frac <= cfg.max_frac && cfg.max_frac <= 1.0) {
        return bad(format!(
            "area fractions must satisfy 0 < min <= max <= 1, got [{}, {}]",
            cfg.min_frac, cfg.max_frac
        ));
    }
    if !(cfg.min_aspect > 0.0 && cfg.min_aspect <= cfg.max_aspect) {
        return bad(format!(
            "aspect bounds must satisfy 0 < min <= max, got [{}, {}]",
            cfg.min_aspect, cfg.max_aspect
        ));
    }
    let max_w = src_dims.1.min(dst_dims.1);
    let max_h = src_dims.0.min(dst_dims.0);
    let dst_area = (dst_dims.0 * dst_dims.1) as f64;
    // small slack so exact fractions such as 1/64 survive rounding
    let min_area = (cfg.min_frac * dst_area - 1e-9).ceil().max(16.0) as usize;
    let max_area = (cfg.max_frac * dst_area + 1e-9).floor() as usize;
    let mut out = Vec::new();
    for w in MIN_REGION_SIDE..=max_w {
        let wf = w as f64;
        let lo = [
            min_area.div_ceil(w),
            (wf / cfg.max_aspect - 1e-9).ceil() as usize,
            MIN_REGION_SIDE,
        ]
        .into_iter()
        .max()
        .unwrap();
        let hi = [max_area / w, (wf / cfg.min_aspect + 1e-9).floor() as usize, max_h]
            .into_iter()
            .min()
            .unwrap();
        if lo <= hi {
            out.push((w, lo, hi));
        }
    }
    if out.is_empty() {
        return bad(format!(
            "no region satisfies area [{min_area}, {max_area}] px and aspect [{}, {}] within {:?} / {:?}",
            cfg.min_aspect, cfg.max_aspect, src_dims, dst_dims
        ));
    }
    Ok(out)
}
