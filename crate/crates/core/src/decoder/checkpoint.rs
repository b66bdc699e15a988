//! `DEC1` checkpoint: magic, stage count, `C_text`, the four `C_i`, `tau`,
//! then per stage the row-major weight followed by the bias. All values are
//! little-endian; parameters are stored as f32.

use std::fs;
use std::path::Path;

use super::{DecoderParams, StageParams};
use crate::error::{Error, FormatError, Result};
use crate::features::{push_f32s, ByteReader, STAGES};

pub const DEC_MAGIC: &[u8; 4] = b"DEC1";

impl DecoderParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * (8 + self.param_count()));
        out.extend_from_slice(DEC_MAGIC);
        out.extend_from_slice(&(STAGES as u32).to_le_bytes());
        out.extend_from_slice(&(self.text_dim() as u32).to_le_bytes());
        for s in &self.stages {
            out.extend_from_slice(&(s.in_dim as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.temperature as f32).to_le_bytes());
        for s in &self.stages {
            push_f32s(&mut out, s.weight.iter().map(|&v| v as f32));
            push_f32s(&mut out, s.bias.iter().map(|&v| v as f32));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(bytes);
        rd.magic(DEC_MAGIC)?;
        let count = rd.u32("stage_count")? as usize;
        if count != STAGES {
            return Err(FormatError::DimMismatch {
                field: "stage_count".into(),
                detail: format!("expected {STAGES}, found {count}"),
            }
            .into());
        }
        let text_dim = rd.u32("text_dim")? as usize;
        let mut dims = [0usize; STAGES];
        for (i, d) in dims.iter_mut().enumerate() {
            *d = rd.u32(&format!("stage {i} channels"))? as usize;
        }
        if text_dim == 0 || dims.contains(&0) {
            return Err(FormatError::DimMismatch {
                field: "header".into(),
                detail: format!("zero dimension in C_text={text_dim}, C_i={dims:?}"),
            }
            .into());
        }
        let tau = rd.f32s(1, "temperature")?[0] as f64;
        let mut stages = Vec::with_capacity(STAGES);
        for (i, &c) in dims.iter().enumerate() {
            let weight = rd.f32s(c * text_dim, &format!("stage {i} weight"))?;
            let bias = rd.f32s(text_dim, &format!("stage {i} bias"))?;
            if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
                return Err(FormatError::NonFinite {
                    field: format!("stage {i}"),
                }
                .into());
            }
            stages.push(StageParams {
                in_dim: c,
                out_dim: text_dim,
                weight: weight.into_iter().map(f64::from).collect(),
                bias: bias.into_iter().map(f64::from).collect(),
            });
        }
        rd.finish("stage 3 bias")?;
        let params = DecoderParams {
            stages: stages.try_into().expect("four stages"),
            temperature: tau,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rounded(p: &DecoderParams) -> DecoderParams {
        let mut q = p.clone();
        q.for_each_mut(|v| *v = *v as f32 as f64);
        q.temperature = p.temperature as f32 as f64;
        q
    }

    #[test]
    fn round_trip_is_exact_at_f32() {
        let p = DecoderParams::init([3, 5, 7, 2], 4, 0.07, 11).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"DEC1");
        assert_eq!(bytes.len(), 4 * (1 + 1 + 1 + 4 + 1) + 4 * p.param_count());
        let q = DecoderParams::from_bytes(&bytes).unwrap();
        assert_eq!(q, rounded(&p));
        assert_eq!(q.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = DecoderParams::init([2; 4], 3, 0.07, 1).unwrap();
        let bytes = p.to_bytes();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XYZ1");
        assert!(matches!(
            DecoderParams::from_bytes(&bad),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        bad[..4].copy_from_slice(b"DEC2");
        assert!(matches!(
            DecoderParams::from_bytes(&bad),
            Err(Error::Format(FormatError::UnsupportedVersion { .. }))
        ));
        assert!(matches!(
            DecoderParams::from_bytes(&bytes[..bytes.len() - 2]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            DecoderParams::from_bytes(&long),
            Err(Error::Format(FormatError::TrailingBytes { .. }))
        ));
        let mut nan = bytes;
        let at = nan.len() - 4;
        nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(DecoderParams::from_bytes(&nan).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decoder.dec1");
        let p = DecoderParams::init([4; 4], 4, 0.1, 5).unwrap();
        p.save(&path).unwrap();
        assert_eq!(DecoderParams::load(&path).unwrap(), rounded(&p));
    }
}
