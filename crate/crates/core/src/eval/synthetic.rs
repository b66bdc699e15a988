//! Seeded procedural texture suite in the MVTec-AD directory layout.
//!
//! Two texture families serve as categories. Test anomalies come from
//! procedures unrelated to the cut-paste simulation used for training:
//! painted spots, thick scratches, and patches of a foreign texture.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::INPUT_SIZE;
use crate::image::{save_mask_png, RgbImage};
use crate::math::Grid2D;

pub const DEFECT_KINDS: [&str; 3] = ["spot", "scratch", "foreign"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureSuiteConfig {
    pub categories: Vec<String>,
    pub train_normals: usize,
    pub test_normals: usize,
    pub test_anomalies: usize,
    pub seed: u64,
}

impl Default for TextureSuiteConfig {
    fn default() -> Self {
        Self {
            categories: vec!["stripes".into(), "dots".into()],
            train_normals: 32,
            test_normals: 16,
            test_anomalies: 16,
            seed: 0,
        }
    }
}

impl TextureSuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Config("texture suite needs at least one category".into()));
        }
        for c in &self.categories {
            texture_family(c)?;
        }
        if self.train_normals == 0 || self.test_normals == 0 || self.test_anomalies == 0 {
            return Err(Error::Config("texture suite image counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Stripes,
    Dots,
}

fn texture_family(category: &str) -> Result<Family> {
    match category {
        "stripes" => Ok(Family::Stripes),
        "dots" => Ok(Family::Dots),
        other => Err(Error::Config(format!(
            "unknown texture category {other:?} (expected \"stripes\" or \"dots\")"
        ))),
    }
}

fn category_stream(category: &str) -> u64 {
    category.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Generator for image `index` of `split` in `category`; every image has
/// its own stream so counts can change without reshuffling the others.
fn image_rng(seed: u64, category: &str, split: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ category_stream(category));
    rng.set_stream((split << 32) | index as u64);
    rng
}

/// A defect-free texture of the given category.
pub fn normal_texture(category: &str, rng: &mut ChaCha8Rng) -> Result<RgbImage> {
    let family = texture_family(category)?;
    let noise = Normal::new(0.0, 0.01).expect("valid std");
    let n = INPUT_SIZE;
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.02..0.02));
    let mut data = Vec::with_capacity(n * n * 3);
    match family {
        Family::Stripes => {
            let theta = (15.0 + rng.random_range(-3.0..3.0)) * PI / 180.0;
            let period = rng.random_range(7.0..9.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            let base = [0.55 + tint[0], 0.45 + tint[1], 0.35 + tint[2]];
            for r in 0..n {
                for c in 0..n {
                    let t = (c as f64 * theta.cos() + r as f64 * theta.sin()) * 2.0 * PI / period;
                    let s = 0.12 * (t + phase).sin();
                    for b in base {
                        data.push(b + s + noise.sample(rng));
                    }
                }
            }
        }
        Family::Dots => {
            let spacing = rng.random_range(10.0..12.0);
            let (oy, ox) = (rng.random_range(0.0..spacing), rng.random_range(0.0..spacing));
            let base = [0.35 + tint[0], 0.45 + tint[1], 0.55 + tint[2]];
            for r in 0..n {
                for c in 0..n {
                    let dy = ((r as f64 - oy).rem_euclid(spacing)) - spacing / 2.0;
                    let dx = ((c as f64 - ox).rem_euclid(spacing)) - spacing / 2.0;
                    let s = -0.2 * (-(dx * dx + dy * dy) / (2.0 * 2.5 * 2.5)).exp();
                    for b in base {
                        data.push(b + s + noise.sample(rng));
                    }
                }
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    RgbImage::new(n, n, data)
}

fn paint(img: &mut RgbImage, mask: &mut Grid2D, r: usize, c: usize, rgb: [f64; 3], alpha: f64) {
    for (ch, v) in rgb.iter().enumerate() {
        let old = img.get(r, c, ch);
        img.set(r, c, ch, old + alpha * (v - old));
    }
    if alpha >= 0.5 {
        mask.set(r, c, 1.0);
    }
}

fn vivid_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    let k = rng.random_range(0..3);
    c[k] = if c[k] > 0.5 { 0.05 } else { 0.95 };
    c
}

/// Paints one defect of `kind` onto `img`; returns the image and its mask.
pub fn apply_defect(img: &RgbImage, kind: &str, rng: &mut ChaCha8Rng) -> Result<(RgbImage, Grid2D)> {
    if !DEFECT_KINDS.contains(&kind) {
        return Err(Error::Config(format!("unknown defect kind {kind:?}")));
    }
    let (h, w) = img.dims();
    if h < 64 || w < 64 {
        return Err(Error::Config(format!("defects need at least a 64x64 image, got {h}x{w}")));
    }
    let mut out = img.clone();
    let mut mask = Grid2D::zeros(h, w);
    let margin = 24.0;
    let cy = rng.random_range(margin..h as f64 - margin);
    let cx = rng.random_range(margin..w as f64 - margin);
    match kind {
        "spot" => {
            let radius = rng.random_range(8.0..16.0);
            let color = vivid_color(rng);
            for r in 0..h {
                for c in 0..w {
                    let d = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
                    let alpha = (radius + 0.5 - d).clamp(0.0, 1.0);
                    if alpha > 0.0 {
                        paint(&mut out, &mut mask, r, c, color, alpha);
                    }
                }
            }
        }
        "scratch" => {
            let len = rng.random_range(60.0..120.0);
            let half_width = rng.random_range(1.5..2.5);
            let angle = rng.random_range(0.0..PI);
            let lum = if rng.random::<bool>() { 0.1 } else { 0.9 };
            let color = [lum; 3];
            let (dy, dx) = (angle.sin(), angle.cos());
            for r in 0..h {
                for c in 0..w {
                    let (py, px) = (r as f64 - cy, c as f64 - cx);
                    let along = px * dx + py * dy;
                    let across = (-px * dy + py * dx).abs();
                    if along.abs() <= len / 2.0 {
                        let alpha = (half_width + 0.5 - across).clamp(0.0, 1.0);
                        if alpha > 0.0 {
                            paint(&mut out, &mut mask, r, c, color, alpha);
                        }
                    }
                }
            }
        }
        "foreign" => {
            let ph = rng.random_range(24..48usize);
            let pw = rng.random_range(24..48usize);
            let r0 = (cy as usize).saturating_sub(ph / 2).min(h - ph);
            let c0 = (cx as usize).saturating_sub(pw / 2).min(w - pw);
            let a = vivid_color(rng);
            let b = vivid_color(rng);
            let cell = rng.random_range(3..6usize);
            for r in r0..r0 + ph {
                for c in c0..c0 + pw {
                    let color = if ((r - r0) / cell + (c - c0) / cell) % 2 == 0 { a } else { b };
                    paint(&mut out, &mut mask, r, c, color, 1.0);
                }
            }
        }
        _ => unreachable!("kind checked above"),
    }
    Ok((out, mask))
}

/// Test image with its defect kind (`None` for normal) and mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteTestImage {
    pub image: RgbImage,
    pub kind: Option<&'static str>,
    pub mask: Grid2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCategory {
    pub name: String,
    pub train: Vec<RgbImage>,
    pub test: Vec<SuiteTestImage>,
}

const SPLIT_TRAIN: u64 = 1;
const SPLIT_TEST_NORMAL: u64 = 2;
const SPLIT_TEST_ANOMALY: u64 = 3;

/// Training normal `index` of `category`.
pub fn train_image(category: &str, cfg: &TextureSuiteConfig, index: usize) -> Result<RgbImage> {
    normal_texture(category, &mut image_rng(cfg.seed, category, SPLIT_TRAIN, index))
}

/// Test image `index` of `category`: the first `test_normals` are normal,
/// the rest carry one defect each, cycling through [`DEFECT_KINDS`].
pub fn test_image(category: &str, cfg: &TextureSuiteConfig, index: usize) -> Result<SuiteTestImage> {
    if index < cfg.test_normals {
        let image = normal_texture(category, &mut image_rng(cfg.seed, category, SPLIT_TEST_NORMAL, index))?;
        let (h, w) = image.dims();
        return Ok(SuiteTestImage {
            image,
            kind: None,
            mask: Grid2D::zeros(h, w),
        });
    }
    let i = index - cfg.test_normals;
    let mut rng = image_rng(cfg.seed, category, SPLIT_TEST_ANOMALY, i);
    let base = normal_texture(category, &mut rng)?;
    let kind = DEFECT_KINDS[i % DEFECT_KINDS.len()];
    let (image, mask) = apply_defect(&base, kind, &mut rng)?;
    Ok(SuiteTestImage {
        image,
        kind: Some(kind),
        mask,
    })
}

pub fn generate_category(category: &str, cfg: &TextureSuiteConfig) -> Result<SuiteCategory> {
    texture_family(category)?;
    let train = (0..cfg.train_normals)
        .map(|i| train_image(category, cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..cfg.test_normals + cfg.test_anomalies)
        .map(|i| test_image(category, cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteCategory {
        name: category.to_string(),
        train,
        test,
    })
}

pub fn generate_suite(cfg: &TextureSuiteConfig) -> Result<Vec<SuiteCategory>> {
    cfg.validate()?;
    cfg.categories.iter().map(|c| generate_category(c, cfg)).collect()
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes the suite as `<root>/<category>/{train/good, test/<kind>,
/// ground_truth/<kind>}` with zero-padded three-digit file names.
pub fn write_suite(root: &Path, cfg: &TextureSuiteConfig) -> Result<()> {
    for cat in generate_suite(cfg)? {
        let dir = root.join(&cat.name);
        let train_dir = dir.join("train").join("good");
        ensure_dir(&train_dir)?;
        for (i, img) in cat.train.iter().enumerate() {
            img.save_png(&train_dir.join(format!("{i:03}.png")))?;
        }
        let mut counters = std::collections::BTreeMap::new();
        for t in &cat.test {
            let kind = t.kind.unwrap_or("good");
            let n = counters.entry(kind).or_insert(0usize);
            let test_dir = dir.join("test").join(kind);
            ensure_dir(&test_dir)?;
            t.image.save_png(&test_dir.join(format!("{n:03}.png")))?;
            if t.kind.is_some() {
                let gt = dir.join("ground_truth").join(kind);
                ensure_dir(&gt)?;
                save_mask_png(&t.mask, &gt.join(format!("{n:03}_mask.png")))?;
            }
            *n += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TextureSuiteConfig {
        TextureSuiteConfig {
            train_normals: 2,
            test_normals: 1,
            test_anomalies: 3,
            ..TextureSuiteConfig::default()
        }
    }

    #[test]
    fn deterministic_and_distinct() {
        let a = generate_suite(&tiny()).unwrap();
        let b = generate_suite(&tiny()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].train[0], a[0].train[1]);
        let other = generate_suite(&TextureSuiteConfig { seed: 1, ..tiny() }).unwrap();
        assert_ne!(a[0].train[0], other[0].train[0]);
        // growing a split leaves existing images untouched
        let more = generate_suite(&TextureSuiteConfig { train_normals: 3, ..tiny() }).unwrap();
        assert_eq!(more[0].train[..2], a[0].train[..]);
    }

    #[test]
    fn defects_have_masks_and_change_pixels() {
        let suite = generate_suite(&tiny()).unwrap();
        for cat in &suite {
            assert_eq!(cat.test.len(), 4);
            for t in &cat.test {
                let area = t.mask.values().iter().sum::<f64>();
                match t.kind {
                    None => assert_eq!(area, 0.0),
                    Some(_) => {
                        assert!(t.mask.is_binary());
                        assert!(area > 150.0, "{:?} area {area}", t.kind);
                    }
                }
            }
        }
    }

    #[test]
    fn unknown_names_rejected() {
        assert!(TextureSuiteConfig { categories: vec!["wood".into()], ..tiny() }.validate().is_err());
        let img = RgbImage::filled(64, 64, [0.5; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(apply_defect(&img, "dent", &mut rng).is_err());
        let small = RgbImage::filled(32, 32, [0.5; 3]).unwrap();
        assert!(apply_defect(&small, "spot", &mut rng).is_err());
    }

    #[test]
    fn written_layout() {
        let dir = tempfile::tempdir().unwrap();
        write_suite(dir.path(), &tiny()).unwrap();
        let d = dir.path().join("dots");
        assert!(d.join("train/good/001.png").exists());
        assert!(d.join("test/good/000.png").exists());
        for k in DEFECT_KINDS {
            assert!(d.join(format!("test/{k}/000.png")).exists());
            assert!(d.join(format!("ground_truth/{k}/000_mask.png")).exists());
        }
    }
}
