//! Anomaly-map exports: an 8-bit heatmap PNG for viewing and a raw
//! little-endian f32 dump that is the source of truth.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use iad_core::Grid2D;

/// Viridis sampled at nine evenly spaced points.
const RAMP: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [72.0, 36.0, 117.0],
    [65.0, 68.0, 135.0],
    [53.0, 95.0, 141.0],
    [42.0, 120.0, 142.0],
    [33.0, 145.0, 140.0],
    [34.0, 168.0, 132.0],
    [122.0, 209.0, 81.0],
    [253.0, 231.0, 37.0],
];

/// Colour for a probability; values outside [0, 1] are clamped.
pub fn ramp(v: f64) -> [u8; 3] {
    let t = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) } * (RAMP.len() - 1) as f64;
    let i = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - i as f64;
    std::array::from_fn(|c| (RAMP[i][c] + f * (RAMP[i + 1][c] - RAMP[i][c])).round() as u8)
}

/// Heatmap on the fixed [0, 1] scale; the map's own min and max go in
/// `tEXt` chunks.
pub fn write_heatmap(map: &Grid2D, path: &Path) -> Result<()> {
    let (h, w) = map.dims();
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.add_text_chunk("min".into(), format!("{:.9}", map.min()))?;
    enc.add_text_chunk("max".into(), format!("{:.9}", map.max()))?;
    let mut writer = enc.write_header()?;
    let data: Vec<u8> = map.values().iter().flat_map(|&v| ramp(v)).collect();
    writer.write_image_data(&data)?;
    writer.finish()?;
    Ok(())
}

/// Row-major f32 values with no header.
pub fn write_raw(map: &Grid2D, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = map.values().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
