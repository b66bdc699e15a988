//! RGB images with channel values in `[0, 1]`, plus 8-bit PNG IO for
//! images and binary masks.

use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{Grid2D, Resampler};

pub const MIN_SIDE: usize = 8;

/// Interleaved RGB image, row-major, channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidDimension(format!(
                "image must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::mismatch(
                "image value count",
                height * width * 3,
                data.len(),
            ));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidDimension(format!(
                "image value {} at index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    /// Builds an image from a per-pixel closure; values are clamped to `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend(f(r, c).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self::new(height, width, data)
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
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * 3 + ch]
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Sets a channel value, clamped to `[0, 1]`.
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f64) {
        self.data[(row * self.width + col) * 3 + ch] = value.clamp(0.0, 1.0);
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// One channel as a row-major plane.
    pub fn channel(&self, ch: usize) -> Vec<f64> {
        self.data.iter().skip(ch).step_by(3).copied().collect()
    }

    /// Rec. 601 luma.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                for ch in 0..3 {
                    out.data[(r * self.width + c) * 3 + ch] = self.get(r, self.width - 1 - c, ch);
                }
            }
        }
        out
    }

    /// Align-corners bilinear resize to arbitrary dims.
    pub fn resize(&self, height: usize, width: usize) -> Result<RgbImage> {
        if (height, width) == self.dims() {
            return Ok(self.clone());
        }
        let rs = Resampler::new(self.dims(), (height, width))?;
        let mut planes = Vec::with_capacity(3);
        for ch in 0..3 {
            let mut out = vec![0.0; height * width];
            rs.apply_slice(&self.channel(ch), &mut out);
            planes.push(out);
        }
        let data = (0..height * width)
            .flat_map(|i| [planes[0][i], planes[1][i], planes[2][i]].map(|v| v.clamp(0.0, 1.0)))
            .collect();
        RgbImage::new(height, width, data)
    }

    pub fn load_png(path: &Path) -> Result<RgbImage> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        RgbImage::new(h as usize, w as usize, data)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[inline]
pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a binary mask as an 8-bit grayscale PNG (0 or 255).
pub fn save_mask_png(mask: &Grid2D, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = mask
        .values()
        .iter()
        .map(|&v| if v > 0.0 { 255 } else { 0 })
        .collect();
    image::save_buffer(
        path,
        &bytes,
        mask.width() as u32,
        mask.height() as u32,
        image::ColorType::L8,
    )
    .map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a mask PNG; any non-zero pixel is anomalous.
pub fn load_mask_png(path: &Path) -> Result<Grid2D> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let values = gray
        .as_raw()
        .iter()
        .map(|&b| if b > 0 { 1.0 } else { 0.0 })
        .collect();
    Grid2D::new(h as usize, w as usize, values)
}

/// Nearest-neighbour resize of a binary mask.
pub fn resize_mask(mask: &Grid2D, height: usize, width: usize) -> Grid2D {
    if mask.dims() == (height, width) {
        return mask.clone();
    }
    let (mh, mw) = mask.dims();
    Grid2D::from_fn(height, width, |r, c| {
        let sr = ((r as f64 + 0.5) * mh as f64 / height as f64) as usize;
        let sc = ((c as f64 + 0.5) * mw as f64 / width as f64) as usize;
        mask.get(sr.min(mh - 1), sc.min(mw - 1))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_or_out_of_range() {
        assert!(RgbImage::filled(7, 8, [0.5; 3]).is_err());
        assert!(RgbImage::new(8, 8, vec![1.5; 192]).is_err());
        assert!(RgbImage::new(8, 8, vec![0.5; 191]).is_err());
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(9, 12, |r, c| [r as f64 / 8.0, c as f64 / 11.0, 0.25]).unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = RgbImage::load_png(&p).unwrap();
        assert_eq!(back.dims(), (9, 12));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let mask = Grid2D::from_fn(9, 12, |r, c| ((r + c) % 3 == 0) as u8 as f64);
        let mp = dir.path().join("m.png");
        save_mask_png(&mask, &mp).unwrap();
        assert_eq!(load_mask_png(&mp).unwrap(), mask);
    }

    #[test]
    fn resize_and_flip() {
        let img = RgbImage::filled(10, 10, [0.2, 0.4, 0.6]).unwrap();
        let big = img.resize(20, 30).unwrap();
        assert_eq!(big.dims(), (20, 30));
        assert!((big.get(5, 7, 2) - 0.6).abs() < 1e-12);
        let ramp = RgbImage::from_fn(8, 8, |_, c| [c as f64 / 7.0; 3]).unwrap();
        let f = ramp.flip_horizontal();
        assert_eq!(f.get(3, 0, 0), ramp.get(3, 7, 0));
        assert_eq!(f.flip_horizontal(), ramp);
    }
}
