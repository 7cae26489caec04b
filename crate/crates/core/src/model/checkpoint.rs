//! Binary containers for parameters and optimizer state.
//!
//! Layout: 4-byte magic, `u32` version, `u32`-length-prefixed JSON header,
//! `u32` tensor count, then per tensor a `u32`-length-prefixed UTF-8 name,
//! `u32` rank, `u32` extents and little-endian `f32` values. All integers are
//! little-endian.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::params::Parameters;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn encode<F: Scalar>(magic: &[u8; 4], header: &str, tensors: &[(&str, &Tensor<F>)]) -> Vec<u8> {
    let mut out = Vec::new();
    let put = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
    out.extend_from_slice(magic);
    put(&mut out, CHECKPOINT_VERSION);
    put(&mut out, header.len() as u32);
    out.extend_from_slice(header.as_bytes());
    put(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        put(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put(&mut out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len(),
                msg: format!("truncated: needed {n} more bytes at {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub(crate) fn decode<F: Scalar>(magic: &[u8; 4], bytes: &[u8]) -> Result<(String, Vec<(String, Tensor<F>)>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != magic {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let hlen = r.u32()?;
    let at = r.pos;
    let header = String::from_utf8(r.take(hlen)?.to_vec()).map_err(|_| Error::Format {
        offset: at,
        msg: "header is not UTF-8".into(),
    })?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = r.u32()?;
        let at = r.pos;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Format {
            offset: at,
            msg: "tensor name is not UTF-8".into(),
        })?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format {
            offset: r.pos,
            msg: "tensor size overflows".into(),
        })?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| F::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            msg: "trailing bytes".into(),
        });
    }
    Ok((header, tensors))
}

pub fn checkpoint_bytes<F: Scalar>(params: &Parameters<F>) -> Result<Vec<u8>> {
    let header = serde_json::to_string(params.config())?;
    let named: Vec<(&str, &Tensor<F>)> = params.names().zip(params.tensors()).collect();
    Ok(encode(CHECKPOINT_MAGIC, &header, &named))
}

/// Rebuilds parameters; rejects tensors whose names or shapes disagree with
/// the stored config, and a stored config that differs from `expected`.
pub fn checkpoint_from_bytes<F: Scalar>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Parameters<F>> {
    let (header, named) = decode(CHECKPOINT_MAGIC, bytes)?;
    let config: ModelConfig = serde_json::from_str(&header)?;
    if let Some(exp) = expected {
        if exp != &config {
            return Err(Error::Config(
                "checkpoint config differs from the requested model config".into(),
            ));
        }
    }
    Parameters::from_named(config, named)
}

pub fn save_checkpoint<F: Scalar>(path: impl AsRef<Path>, params: &Parameters<F>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(params)?;
    fs::write(path, bytes).map_err(|e| Error::from(e).at(path))
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Parameters<F>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).at(path))?;
    checkpoint_from_bytes(&bytes, expected).map_err(|e| e.at(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_parameters;

    #[test]
    fn corrupt_bytes_are_rejected() {
        let cfg = ModelConfig { d_model: 8, heads: 2, input_dim: 3, ..Default::default() };
        let params = init_parameters::<f32>(&cfg, 0).unwrap();
        let bytes = checkpoint_bytes(&params).unwrap();
        let back: Parameters<f32> = checkpoint_from_bytes(&bytes, Some(&cfg)).unwrap();
        assert_eq!(back.tensors(), params.tensors());
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(checkpoint_from_bytes::<f32>(&bad, None), Err(Error::Format { .. })));
        assert!(checkpoint_from_bytes::<f32>(&bytes[..bytes.len() - 1], None).is_err());
        let other = ModelConfig { d_model: 16, ..cfg };
        assert!(checkpoint_from_bytes::<f32>(&bytes, Some(&other)).is_err());
    }
}
