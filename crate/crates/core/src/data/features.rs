use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const TPFT_MAGIC: &[u8; 4] = b"TPFT";
pub const TPFT_VERSION: u32 = 1;
const HEADER: usize = 16;

/// `T×d_in` per-frame visual features, stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::shape("feature sequence needs T >= 1 and d_in >= 1"));
        }
        if values.len() != frames * dim {
            return Err(Error::shape(format!(
                "{frames}x{dim} features but {} values",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value {i}")));
        }
        Ok(Self {
            frames,
            dim,
            values,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Frames `start..end`.
    pub fn crop(&self, start: usize, end: usize) -> FeatureSequence {
        FeatureSequence {
            frames: end - start,
            dim: self.dim,
            values: self.values[start * self.dim..end * self.dim].to_vec(),
        }
    }

    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        Tensor::from_fn(self.frames, self.dim, |r, c| {
            F::from_f32(self.values[r * self.dim + c]).unwrap()
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 4 * self.values.len());
        out.extend_from_slice(TPFT_MAGIC);
        out.extend_from_slice(&TPFT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the header only, returning `(T, d_in)`.
    pub fn parse_header(bytes: &[u8]) -> Result<(usize, usize)> {
        let fmt = |offset, msg: &str| Error::Format {
            offset,
            msg: msg.to_string(),
        };
        if bytes.len() < 4 || &bytes[..4] != TPFT_MAGIC {
            return Err(fmt(0, "bad magic, expected TPFT"));
        }
        if bytes.len() < HEADER {
            return Err(fmt(bytes.len(), "truncated header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != TPFT_VERSION {
            return Err(fmt(4, &format!("unsupported version {version}")));
        }
        let (t, d) = (word(8) as usize, word(12) as usize);
        if t == 0 {
            return Err(fmt(8, "zero frames"));
        }
        if d == 0 {
            return Err(fmt(12, "zero feature width"));
        }
        Ok((t, d))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (t, d) = Self::parse_header(bytes)?;
        let expected = t
            .checked_mul(d)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER))
            .ok_or_else(|| Error::Format {
                offset: 8,
                msg: "dimensions overflow".into(),
            })?;
        if bytes.len() < expected {
            return Err(Error::Format {
                offset: bytes.len(),
                msg: format!("truncated payload, expected {expected} bytes"),
            });
        }
        if bytes.len() > expected {
            return Err(Error::Format {
                offset: expected,
                msg: "trailing bytes after payload".into(),
            });
        }
        let mut values = Vec::with_capacity(t * d);
        for (i, chunk) in bytes[HEADER..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: HEADER + 4 * i,
                    msg: "non-finite value".into(),
                });
            }
            values.push(v);
        }
        Ok(Self {
            frames: t,
            dim: d,
            values,
        })
    }
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    FeatureSequence::from_bytes(&bytes).map_err(|e| e.at(path))
}

pub fn write_features(path: impl AsRef<Path>, fs_: &FeatureSequence) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::from(e).at(path))?;
    f.write_all(&fs_.to_bytes())
        .map_err(|e| Error::from(e).at(path))?;
    Ok(())
}
