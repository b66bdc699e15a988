//! Simulated anomalies: cut-paste of random patches, smoothed by Poisson
//! image editing, with the pasted area recorded as a pixel mask.

mod poisson;
mod region;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{save_mask_png, RgbImage};
use crate::math::Grid2D;

pub use poisson::{
    build_channel_system, poisson_blend, poisson_blend_with_report, solve_cg, BlendMode,
    ChannelSystem, PoissonReport, SolverConfig,
};
pub use region::{sample_region, RegionConfig, RegionSpec};

/// A simulated anomalous image with its ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalySample {
    pub image: RgbImage,
    pub mask: Grid2D,
    pub provenance: Vec<RegionSpec>,
    pub category: String,
}

impl AnomalySample {
    /// Wraps a normal image as a sample with an empty mask.
    pub fn normal(image: RgbImage, category: impl Into<String>) -> Self {
        let (h, w) = image.dims();
        Self {
            image,
            mask: Grid2D::zeros(h, w),
            provenance: Vec::new(),
            category: category.into(),
        }
    }

    pub fn is_anomalous(&self) -> bool {
        !self.provenance.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub region: RegionConfig,
    pub max_patches: usize,
    pub mode: BlendMode,
    pub solver: SolverConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            region: RegionConfig::default(),
            max_patches: 3,
            mode: BlendMode::Mixed,
            solver: SolverConfig::default(),
        }
    }
}

/// Hard paste of the source rectangle; returns the image and a mask that is
/// 1 exactly on the pasted rectangle.
pub fn cut_paste(
    dst: &RgbImage,
    src: &RgbImage,
    region: &RegionSpec,
) -> Result<(RgbImage, Grid2D)> {
    region.validate(src.dims(), dst.dims())?;
    let mut out = dst.clone();
    for r in 0..region.h {
        for c in 0..region.w {
            for ch in 0..3 {
                out.set(
                    region.dy + r,
                    region.dx + c,
                    ch,
                    src.get(region.y0 + r, region.x0 + c, ch),
                );
            }
        }
    }
    Ok((out, region_mask(dst.dims(), region)))
}

fn region_mask(dims: (usize, usize), region: &RegionSpec) -> Grid2D {
    Grid2D::from_fn(dims.0, dims.1, |r, c| region.contains_dst(r, c) as u8 as f64)
}

/// Mean absolute channel difference over pixel pairs straddling the
/// destination rectangle's edge (one pixel inside, its 4-neighbour outside).
pub fn boundary_jump(img: &RgbImage, region: &RegionSpec) -> f64 {
    let (h, w) = img.dims();
    let (top, left) = (region.dy, region.dx);
    let (bottom, right) = (region.dy + region.h - 1, region.dx + region.w - 1);
    let mut total = 0.0;
    let mut pairs = 0usize;
    let mut add = |inside: (usize, usize), outside: (usize, usize)| {
        let a = img.pixel(inside.0, inside.1);
        let b = img.pixel(outside.0, outside.1);
        total += (0..3).map(|ch| (a[ch] - b[ch]).abs()).sum::<f64>() / 3.0;
        pairs += 1;
    };
    for c in left..=right {
        if top > 0 {
            add((top, c), (top - 1, c));
        }
        if bottom + 1 < h {
            add((bottom, c), (bottom + 1, c));
        }
    }
    for r in top..=bottom {
        if left > 0 {
            add((r, left), (r, left - 1));
        }
        if right + 1 < w {
            add((r, right), (r, right + 1));
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Pastes 1..=`max_patches` regions of `donor` into `normal`, each blended
/// with [`poisson_blend`]. The mask is the union of pasted rectangles.
///
/// When `donor` is `normal` and a region maps onto itself the blend is a
/// near no-op; the sample is still emitted with its mask.
pub fn simulate_anomaly(
    normal: &RgbImage,
    donor: &RgbImage,
    seed: u64,
    category: &str,
    cfg: &SimulationConfig,
) -> Result<AnomalySample> {
    if normal.dims() != donor.dims() {
        return Err(Error::mismatch(
            "donor image dims",
            format!("{:?}", normal.dims()),
            format!("{:?}", donor.dims()),
        ));
    }
    if cfg.max_patches == 0 {
        return Err(Error::Config("max_patches must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patches = rng.random_range(1..=cfg.max_patches);
    let mut image = normal.clone();
    let (h, w) = normal.dims();
    let mut mask = Grid2D::zeros(h, w);
    let mut provenance = Vec::with_capacity(patches);
    for _ in 0..patches {
        let region = region::sample_region_with(&mut rng, donor.dims(), image.dims(), &cfg.region)?;
        image = poisson_blend(&image, donor, &region, cfg.mode, &cfg.solver)?;
        for r in region.dy..region.dy + region.h {
            for c in region.dx..region.dx + region.w {
                mask.set(r, c, 1.0);
            }
        }
        provenance.push(region);
    }
    Ok(AnomalySample {
        image,
        mask,
        provenance,
        category: category.to_string(),
    })
}

/// JSON sidecar written next to each sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub seed: u64,
    pub regions: Vec<RegionSpec>,
    pub category: String,
}

/// Paths of one written sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePaths {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub meta: PathBuf,
}

/// Writes `<root>/<category>/<seed>_{img,mask}.png` and `<seed>_meta.json`.
pub fn write_sample(root: &Path, sample: &AnomalySample, seed: u64) -> Result<SamplePaths> {
    let dir = root.join(&sample.category);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let paths = SamplePaths {
        image: dir.join(format!("{seed}_img.png")),
        mask: dir.join(format!("{seed}_mask.png")),
        meta: dir.join(format!("{seed}_meta.json")),
    };
    sample.image.save_png(&paths.image)?;
    save_mask_png(&sample.mask, &paths.mask)?;
    let meta = SampleMeta {
        seed,
        regions: sample.provenance.clone(),
        category: sample.category.clone(),
    };
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(&paths.meta, json + "\n").map_err(|e| Error::io(&paths.meta, e))?;
    Ok(paths)
}
