//! Checkpoint files: an 8-byte little-endian header length, a UTF-8 JSON
//! header, then raw little-endian parameter data in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{DType, ParamStore, Scalar, Tensor};

pub const FORMAT: &str = "pcolab-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub dtype: DType,
    pub seed: u64,
    /// Position of the generator that produced this state, when meaningful.
    pub rng_state: Option<u64>,
    pub params: Vec<ParamEntry>,
    /// Free-form metadata (model config, vocabulary, provenance).
    pub meta: serde_json::Value,
}

pub fn encode<T: Scalar>(params: &ParamStore<T>, seed: u64, rng_state: Option<u64>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        dtype: T::DTYPE,
        seed,
        rng_state,
        params: (0..params.len())
            .map(|i| ParamEntry {
                name: params.name(i).to_string(),
                shape: params.get(i).shape().to_vec(),
                decay: params.decays(i),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + params.num_scalars() * T::DTYPE.size_of());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    Ok((header, 8 + hlen))
}

/// Decodes parameters, converting to `T` if the stored dtype differs.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore<T>)> {
    let (header, mut off) = decode_header(bytes)?;
    let width = header.dtype.size_of();
    let mut store = ParamStore::new();
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let raw = bytes
            .get(off..off + n * width)
            .ok_or_else(|| Error::Checkpoint(format!("truncated data for `{}`", p.name)))?;
        let data: Vec<T> = raw
            .chunks_exact(width)
            .map(|c| match header.dtype {
                DType::F32 => T::cast_from(f32::read_le(c) as f64),
                DType::F64 => T::cast_from(f64::read_le(c)),
            })
            .collect();
        store.add(p.name.clone(), Tensor::new(p.shape.clone(), data)?, p.decay);
        off += n * width;
    }
    if off != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - off)));
    }
    Ok((header, store))
}

pub fn save<T: Scalar>(path: &Path, params: &ParamStore<T>, seed: u64, rng_state: Option<u64>, meta: serde_json::Value) -> Result<()> {
    let bytes = encode(params, seed, rng_state, meta)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(CheckpointHeader, ParamStore<T>)> {
    let mut f = std::fs::File::open(path)
        .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_length_header_then_little_endian_data() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::new(vec![2], vec![1.0, -2.5]).unwrap(), true);
        let bytes = encode(&s, 42, Some(7), serde_json::json!({"k": 1})).unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let tail = &bytes[8 + hlen..];
        assert_eq!(tail, [1.0f32.to_le_bytes(), (-2.5f32).to_le_bytes()].concat());
        let (h, back) = decode::<f32>(&bytes).unwrap();
        assert_eq!(h.seed, 42);
        assert_eq!(h.dtype, DType::F32);
        assert_eq!(back.get(0).data(), s.get(0).data());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), false);
        let bytes = encode(&s, 0, None, serde_json::Value::Null).unwrap();
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
    }
}
