//! Four-stage patch features: a deterministic toy encoder for desk-scale
//! runs, and the PFS1 file format for features computed by any real encoder.
//!
//! PFS1 layout (all little-endian):
//!
//! ```text
//! b"PFS1"
//! u32 stage_count (= 4)
//! 4 x (u32 H_i, u32 W_i, u32 C_i)
//! u32 final_dim
//! 4 x f32[H_i * W_i * C_i]   row-major (h, w, c)
//! f32[final_dim]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::image::RgbImage;

pub const STAGES: usize = 4;
pub const INPUT_SIZE: usize = 224;
pub const DESCRIPTOR_DIM: usize = 20;
pub const ORIENTATION_BINS: usize = 12;
pub const PFS_MAGIC: &[u8; 4] = b"PFS1";

/// One stage's `(H, W, C)` feature grid, row-major `(h, w, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidDimension(format!(
                "feature grid {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::mismatch(
                "feature grid value count",
                height * width * channels,
                data.len(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn patches(&self) -> usize {
        self.height * self.width
    }

    /// Feature vector of patch `k` (row-major patch index).
    #[inline]
    pub fn patch(&self, k: usize) -> &[f32] {
        &self.data[k * self.channels..(k + 1) * self.channels]
    }

    pub fn patch_at(&self, row: usize, col: usize) -> &[f32] {
        self.patch(row * self.width + col)
    }
}

/// Patch features from the four encoder stages plus the global image feature.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatureStack {
    pub stages: [FeatureGrid; STAGES],
    pub final_feature: Vec<f32>,
}

impl PatchFeatureStack {
    pub fn new(stages: [FeatureGrid; STAGES], final_feature: Vec<f32>) -> Result<Self> {
        let stack = Self {
            stages,
            final_feature,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        if self.final_feature.is_empty() {
            return Err(Error::InvalidDimension("final feature is empty".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.data.iter().any(|v| !v.is_finite()) {
                return Err(FormatError::NonFinite {
                    field: format!("stage {i} payload"),
                }
                .into());
            }
        }
        if self.final_feature.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite {
                field: "final feature".into(),
            }
            .into());
        }
        Ok(())
    }

    pub fn stage_dims(&self) -> [usize; STAGES] {
        std::array::from_fn(|i| self.stages[i].channels)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.stages.iter().map(|s| s.data.len()).sum();
        let mut out = Vec::with_capacity(4 + 4 * 14 + 4 * (payload + self.final_feature.len()));
        out.extend_from_slice(PFS_MAGIC);
        out.extend_from_slice(&(STAGES as u32).to_le_bytes());
        for s in &self.stages {
            for d in [s.height, s.width, s.channels] {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.final_feature.len() as u32).to_le_bytes());
        for s in &self.stages {
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in &self.final_feature {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(bytes);
        rd.magic(PFS_MAGIC)?;
        let count = rd.u32("stage_count")? as usize;
        if count != STAGES {
            return Err(FormatError::DimMismatch {
                field: "stage_count".into(),
                detail: format!("expected {STAGES}, found {count}"),
            }
            .into());
        }
        let mut dims = [(0usize, 0usize, 0usize); STAGES];
        for (i, d) in dims.iter_mut().enumerate() {
            let h = rd.u32(&format!("stage {i} height"))? as usize;
            let w = rd.u32(&format!("stage {i} width"))? as usize;
            let c = rd.u32(&format!("stage {i} channels"))? as usize;
            if h == 0 || w == 0 || c == 0 {
                return Err(FormatError::DimMismatch {
                    field: format!("stage {i} dims"),
                    detail: format!("{h}x{w}x{c} has a zero dimension"),
                }
                .into());
            }
            *d = (h, w, c);
        }
        let final_dim = rd.u32("final_dim")? as usize;
        if final_dim == 0 {
            return Err(FormatError::DimMismatch {
                field: "final_dim".into(),
                detail: "must be non-zero".into(),
            }
            .into());
        }
        let mut grids = Vec::with_capacity(STAGES);
        for (i, &(h, w, c)) in dims.iter().enumerate() {
            let data = rd.f32s(h * w * c, &format!("stage {i} payload"))?;
            grids.push(FeatureGrid {
                height: h,
                width: w,
                channels: c,
                data,
            });
        }
        let final_feature = rd.f32s(final_dim, "final feature")?;
        rd.finish("final feature")?;
        let stages: [FeatureGrid; STAGES] = grids.try_into().expect("four stages");
        PatchFeatureStack::new(stages, final_feature)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_features(stack: &PatchFeatureStack, path: &Path) -> Result<()> {
    stack.save(path)
}

pub fn load_features(path: &Path) -> Result<PatchFeatureStack> {
    PatchFeatureStack::load(path)
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated {
                field: field.to_string(),
            }
            .into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Checks a 4-byte magic. A matching 3-byte family prefix with a
    /// different version byte is reported as an unsupported version.
    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found == expected {
            return Ok(());
        }
        let (e, f) = (
            String::from_utf8_lossy(expected).into_owned(),
            String::from_utf8_lossy(found).into_owned(),
        );
        if found[..3] == expected[..3] {
            Err(FormatError::UnsupportedVersion {
                expected: e,
                found: f,
            }
            .into())
        } else {
            Err(FormatError::BadMagic {
                expected: e,
                found: f,
            }
            .into())
        }
    }

    pub(crate) fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| FormatError::DimMismatch {
            field: field.to_string(),
            detail: format!("{n} values overflow"),
        })?;
        let b = self.take(len, field)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn finish(&self, last_field: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(FormatError::TrailingBytes {
                field: last_field.to_string(),
                extra: self.bytes.len() - self.pos,
            }
            .into());
        }
        Ok(())
    }
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, vals: impl IntoIterator<Item = f32>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Toy,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureBackendConfig {
    pub backend: Backend,
    pub grid_size: usize,
    pub stage_dims: [usize; STAGES],
    pub final_dim: usize,
    pub seed: u64,
    /// Directory of `<image stem>.pfs1` files for the file backend.
    pub feature_dir: Option<PathBuf>,
}

impl Default for FeatureBackendConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Toy,
            grid_size: 16,
            stage_dims: [64; STAGES],
            final_dim: 128,
            seed: 0,
            feature_dir: None,
        }
    }
}

impl FeatureBackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 || self.grid_size > INPUT_SIZE {
            return Err(Error::Config(format!(
                "grid_size must be in [2, {INPUT_SIZE}], got {}",
                self.grid_size
            )));
        }
        if self.stage_dims.iter().any(|&c| c < 8) || self.final_dim < 8 {
            return Err(Error::Config(format!(
                "feature dims must be >= 8, got {:?} / {}",
                self.stage_dims, self.final_dim
            )));
        }
        if self.backend == Backend::File && self.feature_dir.is_none() {
            return Err(Error::Config(
                "file backend needs feature_dir pointing at PFS1 files".into(),
            ));
        }
        Ok(())
    }
}

/// Deterministic toy encoder. Projection matrices are drawn once at
/// construction and then shared read-only.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    cfg: FeatureBackendConfig,
    /// Per stage, row-major `DESCRIPTOR_DIM x C_i`.
    projections: [Vec<f64>; STAGES],
    final_projection: Vec<f64>,
}

fn projection_matrix(seed: u64, stream: u64, cols: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let normal = Normal::new(0.0, (1.0 / DESCRIPTOR_DIM as f64).sqrt()).expect("valid std");
    (0..DESCRIPTOR_DIM * cols).map(|_| normal.sample(&mut rng)).collect()
}

impl ToyEncoder {
    pub fn new(cfg: &FeatureBackendConfig) -> Result<Self> {
        cfg.validate()?;
        let projections =
            std::array::from_fn(|i| projection_matrix(cfg.seed, i as u64 + 1, cfg.stage_dims[i]));
        let final_projection = projection_matrix(cfg.seed, STAGES as u64 + 1, cfg.final_dim);
        Ok(Self {
            cfg: cfg.clone(),
            projections,
            final_projection,
        })
    }

    pub fn config(&self) -> &FeatureBackendConfig {
        &self.cfg
    }

    pub fn extract(&self, img: &RgbImage) -> Result<PatchFeatureStack> {
        let img = if img.dims() == (INPUT_SIZE, INPUT_SIZE) {
            img.clone()
        } else {
            img.resize(INPUT_SIZE, INPUT_SIZE)?
        };
        let g = self.cfg.grid_size;
        let descs = cell_descriptors(&img, g);
        let global = region_descriptor(&img, &gradients(&img), 0, INPUT_SIZE, 0, INPUT_SIZE);
        let stages = std::array::from_fn(|i| {
            let c = self.cfg.stage_dims[i];
            let mut data = Vec::with_capacity(g * g * c);
            for d in &descs {
                data.extend(project(d, &self.projections[i], c));
            }
            FeatureGrid {
                height: g,
                width: g,
                channels: c,
                data,
            }
        });
        let final_feature = project(&global, &self.final_projection, self.cfg.final_dim);
        PatchFeatureStack::new(stages, final_feature)
    }
}

pub fn toy_extract(img: &RgbImage, cfg: &FeatureBackendConfig) -> Result<PatchFeatureStack> {
    ToyEncoder::new(cfg)?.extract(img)
}

fn project(desc: &[f64; DESCRIPTOR_DIM], matrix: &[f64], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f64; cols];
    for (k, &d) in desc.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &matrix[k * cols..(k + 1) * cols];
        for (o, m) in out.iter_mut().zip(row) {
            *o += d * m;
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Per-pixel luminance gradient (central differences, replicated borders)
/// as `(magnitude, orientation bin)`.
pub fn gradients(img: &RgbImage) -> Vec<(f64, usize)> {
    let (h, w) = img.dims();
    let lum = img.luminance();
    let at = |r: usize, c: usize| lum[r * w + c];
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let gx = (at(r, (c + 1).min(w - 1)) - at(r, c.saturating_sub(1))) / 2.0;
            let gy = (at((r + 1).min(h - 1), c) - at(r.saturating_sub(1), c)) / 2.0;
            let mag = (gx * gx + gy * gy).sqrt();
            out.push((mag, orientation_bin(gx, gy)));
        }
    }
    out
}

/// Bin of the angle `atan2(gy, gx)` in `[0, 2pi)` split into
/// [`ORIENTATION_BINS`] equal sectors; bin 0 starts at +x.
pub fn orientation_bin(gx: f64, gy: f64) -> usize {
    let mut theta = gy.atan2(gx);
    if theta < 0.0 {
        theta += std::f64::consts::TAU;
    }
    ((theta / std::f64::consts::TAU * ORIENTATION_BINS as f64) as usize) % ORIENTATION_BINS
}

/// Descriptor of the pixel block `[r0, r1) x [c0, c1)`: per-channel mean and
/// standard deviation, magnitude-weighted orientation histogram averaged
/// over the block, and two zeros.
fn region_descriptor(
    img: &RgbImage,
    grads: &[(f64, usize)],
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
) -> [f64; DESCRIPTOR_DIM] {
    let w = img.width();
    let n = ((r1 - r0) * (c1 - c0)) as f64;
    let mut d = [0.0; DESCRIPTOR_DIM];
    let mut sum = [0.0; 3];
    for r in r0..r1 {
        for c in c0..c1 {
            let p = img.pixel(r, c);
            for ch in 0..3 {
                sum[ch] += p[ch];
            }
            let (mag, bin) = grads[r * w + c];
            d[6 + bin] += mag;
        }
    }
    let mean = sum.map(|s| s / n);
    let mut var = [0.0; 3];
    for r in r0..r1 {
        for c in c0..c1 {
            let p = img.pixel(r, c);
            for ch in 0..3 {
                var[ch] += (p[ch] - mean[ch]).powi(2);
            }
        }
    }
    for ch in 0..3 {
        d[ch] = mean[ch];
        d[3 + ch] = (var[ch] / n).sqrt();
    }
    for v in &mut d[6..6 + ORIENTATION_BINS] {
        *v /= n;
    }
    d
}

/// Cell boundaries of a `g`-way split of `size` pixels.
pub fn cell_bounds(size: usize, g: usize, i: usize) -> (usize, usize) {
    (i * size / g, (i + 1) * size / g)
}

/// Row-major `g x g` cell descriptors of a 224x224 image.
pub fn cell_descriptors(img: &RgbImage, g: usize) -> Vec<[f64; DESCRIPTOR_DIM]> {
    let grads = gradients(img);
    let (h, w) = img.dims();
    let mut out = Vec::with_capacity(g * g);
    for gr in 0..g {
        let (r0, r1) = cell_bounds(h, g, gr);
        for gc in 0..g {
            let (c0, c1) = cell_bounds(w, g, gc);
            out.push(region_descriptor(img, &grads, r0, r1, c0, c1));
        }
    }
    out
}

/// Source of feature stacks for named images: the toy encoder, or a
/// directory of PFS1 files keyed by image stem.
#[derive(Debug, Clone)]
pub enum FeatureSource {
    Toy(ToyEncoder),
    Files(PathBuf),
}

impl FeatureSource {
    pub fn from_config(cfg: &FeatureBackendConfig) -> Result<Self> {
        cfg.validate()?;
        match cfg.backend {
            Backend::Toy => Ok(FeatureSource::Toy(ToyEncoder::new(cfg)?)),
            Backend::File => Ok(FeatureSource::Files(
                cfg.feature_dir.clone().expect("validated"),
            )),
        }
    }

    /// Features for `img`, whose file stem is `stem`.
    pub fn features(&self, img: &RgbImage, stem: &str) -> Result<PatchFeatureStack> {
        match self {
            FeatureSource::Toy(enc) => enc.extract(img),
            FeatureSource::Files(dir) => load_features(&dir.join(format!("{stem}.pfs1"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> FeatureBackendConfig {
        FeatureBackendConfig {
            grid_size: 8,
            stage_dims: [8, 12, 16, 8],
            final_dim: 10,
            seed: 5,
            ..Default::default()
        }
    }

    fn random_stack(rng: &mut ChaCha8Rng) -> PatchFeatureStack {
        let stages = std::array::from_fn(|_| {
            let (h, w, c) = (
                rng.random_range(1..5),
                rng.random_range(1..5),
                rng.random_range(1..9),
            );
            let data = (0..h * w * c).map(|_| rng.random::<f32>() * 4.0 - 2.0).collect();
            FeatureGrid::new(h, w, c, data).unwrap()
        });
        let fd = rng.random_range(1..20);
        let final_feature = (0..fd).map(|_| rng.random::<f32>()).collect();
        PatchFeatureStack::new(stages, final_feature).unwrap()
    }

    #[test]
    fn constant_image_gives_constant_grids() {
        let img = RgbImage::filled(224, 224, [0.5; 3]).unwrap();
        let s = toy_extract(&img, &small_cfg()).unwrap();
        for g in &s.stages {
            assert_eq!((g.height, g.width), (8, 8));
            for k in 1..g.patches() {
                assert_eq!(g.patch(k), g.patch(0));
            }
        }
    }

    #[test]
    fn default_grid_is_sixteen() {
        let img = RgbImage::filled(100, 120, [0.2, 0.3, 0.4]).unwrap();
        let s = toy_extract(&img, &FeatureBackendConfig::default()).unwrap();
        for g in &s.stages {
            assert_eq!((g.height, g.width, g.channels), (16, 16, 64));
        }
        assert_eq!(s.final_feature.len(), 128);
    }

    #[test]
    fn extraction_is_deterministic() {
        let img = RgbImage::from_fn(224, 224, |r, c| {
            [((r * c) % 17) as f64 / 16.0, (r % 5) as f64 / 4.0, 0.5]
        })
        .unwrap();
        let a = toy_extract(&img, &small_cfg()).unwrap();
        let b = toy_extract(&img, &small_cfg()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn step_edge_concentrates_in_horizontal_bins() {
        // vertical step edge at column 112
        let img = RgbImage::from_fn(224, 224, |_, c| [(c >= 112) as u8 as f64; 3]).unwrap();
        let descs = cell_descriptors(&img, 16);
        // oracle: per-pixel finite differences, summed per bin
        let lum = img.luminance();
        for gr in 0..16 {
            for gc in 0..16 {
                let (r0, r1) = cell_bounds(224, 16, gr);
                let (c0, c1) = cell_bounds(224, 16, gc);
                let mut hist = [0.0; ORIENTATION_BINS];
                for r in r0..r1 {
                    for c in c0..c1 {
                        let right = lum[r * 224 + (c + 1).min(223)];
                        let left = lum[r * 224 + c.saturating_sub(1)];
                        let gx = (right - left) / 2.0;
                        // no vertical variation in this image
                        if gx != 0.0 {
                            let bin = if gx > 0.0 { 0 } else { 6 };
                            hist[bin] += gx.abs();
                        }
                    }
                }
                let n = ((r1 - r0) * (c1 - c0)) as f64;
                for b in 0..ORIENTATION_BINS {
                    assert!((descs[gr * 16 + gc][6 + b] - hist[b] / n).abs() < 1e-12);
                }
                let d = &descs[gr * 16 + gc];
                let total: f64 = d[6..18].iter().sum();
                if (c0..c1).any(|c| (111..=112).contains(&c)) {
                    assert!(total > 0.0);
                    assert!((d[6] + d[12]) / total > 0.999);
                } else {
                    assert_eq!(total, 0.0);
                }
                assert_eq!((d[18], d[19]), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn mean_std_part_is_flip_equivariant() {
        let img = RgbImage::from_fn(224, 224, |r, c| {
            [
                ((r * 3 + c * 7) % 23) as f64 / 22.0,
                (c as f64 / 223.0).powi(2),
                ((r / 9 + c / 5) % 2) as f64,
            ]
        })
        .unwrap();
        let a = cell_descriptors(&img, 16);
        let b = cell_descriptors(&img.flip_horizontal(), 16);
        for gr in 0..16 {
            for gc in 0..16 {
                let (da, db) = (&a[gr * 16 + gc], &b[gr * 16 + 15 - gc]);
                for k in 0..6 {
                    assert!((da[k] - db[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pfs1_round_trip_random_stacks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dir = tempfile::tempdir().unwrap();
        for i in 0..100 {
            let s = random_stack(&mut rng);
            let p = dir.path().join(format!("{i}.pfs1"));
            save_features(&s, &p).unwrap();
            let back = load_features(&p).unwrap();
            assert_eq!(back.to_bytes(), s.to_bytes());
            assert_eq!(back, s);
        }
    }

    #[test]
    fn hand_assembled_file_decodes() {
        let mut bytes = b"PFS1".to_vec();
        bytes.extend(4u32.to_le_bytes());
        for _ in 0..4 {
            for d in [1u32, 1, 8] {
                bytes.extend(d.to_le_bytes());
            }
        }
        bytes.extend(2u32.to_le_bytes());
        // 0x3F800000 = 1.0, 0xC0490FDB = -pi, 0x00000001 = smallest subnormal
        let words: [u32; 3] = [0x3F80_0000, 0xC049_0FDB, 0x0000_0001];
        for i in 0..34 {
            bytes.extend(words[i % 3].to_le_bytes());
        }
        let s = PatchFeatureStack::from_bytes(&bytes).unwrap();
        assert_eq!(s.stages[0].data[0], 1.0);
        assert_eq!(s.stages[0].data[1], -std::f32::consts::PI);
        assert_eq!(s.stages[0].data[2].to_bits(), 1);
        assert_eq!(s.stages[3].data[7].to_bits(), words[31 % 3]);
        assert_eq!(s.final_feature[1].to_bits(), words[33 % 3]);
    }

    #[test]
    fn parse_errors_name_the_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let good = random_stack(&mut rng).to_bytes();

        let mut v2 = good.clone();
        v2[3] = b'2';
        assert!(matches!(
            PatchFeatureStack::from_bytes(&v2),
            Err(Error::Format(FormatError::UnsupportedVersion { .. }))
        ));
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            PatchFeatureStack::from_bytes(&bad),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        match PatchFeatureStack::from_bytes(&good[..good.len() - 2]) {
            Err(Error::Format(FormatError::Truncated { field })) => {
                assert_eq!(field, "final feature")
            }
            other => panic!("{other:?}"),
        }
        let mut count = good.clone();
        count[4] = 3;
        assert!(matches!(
            PatchFeatureStack::from_bytes(&count),
            Err(Error::Format(FormatError::DimMismatch { .. }))
        ));
        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(
            PatchFeatureStack::from_bytes(&extra),
            Err(Error::Format(FormatError::TrailingBytes { .. }))
        ));
        let mut zero = good;
        zero[8..12].copy_from_slice(&0u32.to_le_bytes());
        match PatchFeatureStack::from_bytes(&zero) {
            Err(Error::Format(FormatError::DimMismatch { field, .. })) => {
                assert_eq!(field, "stage 0 dims")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = FeatureBackendConfig::default();
        cfg.grid_size = 1;
        assert!(cfg.validate().is_err());
        cfg.grid_size = 16;
        cfg.stage_dims[2] = 4;
        assert!(cfg.validate().is_err());
        let file = FeatureBackendConfig {
            backend: Backend::File,
            ..Default::default()
        };
        assert!(file.validate().is_err());
    }
}
