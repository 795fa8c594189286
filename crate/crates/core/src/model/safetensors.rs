// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reader and writer for the single-file tensor container used by the model
//! hub: an 8-byte little-endian header length, a JSON header mapping names to
//! `{dtype, shape, data_offsets}`, then the raw little-endian payload.

use std::collections::BTreeMap;

use half::{bf16, f16};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// One decoded tensor, widened to f32.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self { shape, data }
    }
}

fn tensor_err(name: &str, reason: impl Into<String>) -> Error {
    Error::Tensor {
        name: name.to_string(),
        reason: reason.into(),
    }
}

fn dtype_size(dtype: &str) -> Option<usize> {
    match dtype {
        "F32" => Some(4),
        "F16" | "BF16" => Some(2),
        "F64" => Some(8),
        _ => None,
    }
}

fn decode(dtype: &str, bytes: &[u8]) -> Vec<f32> {
    match dtype {
        "F32" => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        "F16" => bytes
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        "BF16" => bytes
            .chunks_exact(2)
            .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        "F64" => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")) as f32)
            .collect(),
        _ => unreachable!("dtype checked by caller"),
    }
}

/// Parse a container. Errors name the offending tensor where one is at fault.
pub fn read(bytes: &[u8]) -> Result<BTreeMap<String, StoredTensor>> {
    if bytes.len() < 8 {
        return Err(Error::Load("tensor container shorter than its 8-byte header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let payload_start = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Load(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
    let header: Map<String, Value> = serde_json::from_slice(&bytes[8..payload_start])
        .map_err(|e| Error::Load(format!("corrupt container header: {e}")))?;
    let payload = &bytes[payload_start..];

    let mut out = BTreeMap::new();
    for (name, entry) in header {
        if name == "__metadata__" {
            continue;
        }
        let dtype = entry
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| tensor_err(&name, "missing dtype"))?;
        let size = dtype_size(dtype).ok_or_else(|| tensor_err(&name, format!("unsupported dtype {dtype}")))?;
        let shape: Vec<usize> = entry
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| tensor_err(&name, "missing shape"))?
            .iter()
            .map(|v| v.as_u64().map(|x| x as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| tensor_err(&name, "shape entries must be non-negative integers"))?;
        let offsets = entry
            .get("data_offsets")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 2)
            .ok_or_else(|| tensor_err(&name, "missing data_offsets"))?;
        let begin = offsets[0].as_u64().ok_or_else(|| tensor_err(&name, "bad data_offsets"))? as usize;
        let end = offsets[1].as_u64().ok_or_else(|| tensor_err(&name, "bad data_offsets"))? as usize;
        let numel: usize = shape.iter().product();
        if end < begin || end - begin != numel * size {
            return Err(tensor_err(
                &name,
                format!(
                    "byte span {} does not match shape {:?} x {} bytes",
                    end.saturating_sub(begin),
                    shape,
                    size
                ),
            ));
        }
        if end > payload.len() {
            return Err(tensor_err(
                &name,
                format!("truncated: needs bytes up to {end}, payload has {}", payload.len()),
            ));
        }
        let data = decode(dtype, &payload[begin..end]);
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(tensor_err(&name, format!("non-finite value at flat index {i}")));
        }
        out.insert(name, StoredTensor { shape, data });
    }
    Ok(out)
}

/// Serialize tensors as F32, names in sorted order.
pub fn write(tensors: &BTreeMap<String, StoredTensor>) -> Result<Vec<u8>> {
    let mut header = Map::new();
    let mut meta = Map::new();
    meta.insert("format".into(), Value::String("pt".into()));
    header.insert("__metadata__".into(), Value::Object(meta));
    let mut offset = 0usize;
    for (name, t) in tensors {
        let numel: usize = t.shape.iter().product();
        if numel != t.data.len() {
            return Err(tensor_err(name, "data length does not match shape"));
        }
        let end = offset + numel * 4;
        let mut entry = Map::new();
        entry.insert("dtype".into(), Value::String("F32".into()));
        entry.insert("shape".into(), Value::from(t.shape.clone()));
        entry.insert("data_offsets".into(), Value::from(vec![offset, end]));
        header.insert(name.clone(), Value::Object(entry));
        offset = end;
    }
    let mut header_bytes = serde_json::to_vec(&Value::Object(header))?;
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in tensors.values() {
        for x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, StoredTensor> {
        let mut m = BTreeMap::new();
        m.insert("a".into(), StoredTensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]));
        m.insert("b.bias".into(), StoredTensor::new(vec![3], vec![-1., 0.5, 0.25]));
        m
    }

    #[test]
    fn round_trip() {
        let bytes = write(&sample()).unwrap();
        assert_eq!(read(&bytes).unwrap(), sample());
    }

    #[test]
    fn truncated_payload_names_tensor() {
        let mut bytes = write(&sample()).unwrap();
        bytes.truncate(bytes.len() - 4);
        let err = read(&bytes).unwrap_err().to_string();
        assert!(err.contains("b.bias"), "{err}");
    }

    #[test]
    fn half_precision_decodes() {
        let header = br#"{"x":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&f16::from_f32(1.5).to_le_bytes());
        bytes.extend_from_slice(&f16::from_f32(-2.0).to_le_bytes());
        assert_eq!(read(&bytes).unwrap()["x"].data, vec![1.5, -2.0]);
    }

    #[test]
    fn nan_rejected() {
        let mut m = sample();
        m.get_mut("a").unwrap().data[4] = f32::NAN;
        let err = read(&write(&m).unwrap()).unwrap_err().to_string();
        assert!(err.contains("`a`") || err.contains("a:") || err.contains(" a"), "{err}");
    }
}
