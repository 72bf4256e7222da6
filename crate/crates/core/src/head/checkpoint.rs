//! Head checkpoints: a JSON descriptor followed by a raw little-endian `f32`
//! payload in one file.
//!
//! ```text
//! "DPCK" | u32 descriptor length | descriptor JSON | payload
//! ```
//!
//! Tensor offsets in the descriptor are byte offsets into the payload.

use serde::{Deserialize, Serialize};

use super::network::{HeadDims, HeadParams};
use super::HeadError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPCK";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    format: u32,
    dtype: String,
    dims: HeadDims,
    tensors: Vec<TensorEntry>,
}

fn format_err(reason: impl Into<String>) -> HeadError {
    HeadError::Format {
        what: "checkpoint",
        reason: reason.into(),
    }
}

pub fn write_checkpoint(params: &HeadParams) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, shape, values) in params.named_tensors() {
        tensors.push(TensorEntry {
            name,
            shape,
            offset: payload.len(),
        });
        for &v in values {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let desc = Descriptor {
        format: 1,
        dtype: "f32le".into(),
        dims: params.dims,
        tensors,
    };
    let json = serde_json::to_vec(&desc).expect("descriptor serializes");
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<HeadParams, HeadError> {
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format_err("bad magic, expected DPCK"));
    }
    let len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let json = bytes
        .get(8..8 + len)
        .ok_or_else(|| format_err("truncated descriptor"))?;
    let desc: Descriptor =
        serde_json::from_slice(json).map_err(|e| format_err(format!("descriptor: {e}")))?;
    if desc.format != 1 || desc.dtype != "f32le" {
        return Err(format_err(format!(
            "unsupported format {} / dtype {}",
            desc.format, desc.dtype
        )));
    }
    let payload = &bytes[8 + len..];
    let mut params = HeadParams::zeros(desc.dims);
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    if desc.tensors.len() != expected.len() {
        return Err(format_err(format!(
            "{} tensors, expected {}",
            desc.tensors.len(),
            expected.len()
        )));
    }
    for ((entry, (name, shape)), (_, dest)) in desc
        .tensors
        .iter()
        .zip(&expected)
        .zip(params.named_tensors_mut())
    {
        if &entry.name != name || &entry.shape != shape {
            return Err(HeadError::ShapeMismatch(format!(
                "checkpoint tensor {} {:?}, expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let nbytes = dest.len() * 4;
        let raw = payload
            .get(entry.offset..entry.offset + nbytes)
            .ok_or_else(|| format_err(format!("tensor {name} runs past the payload")))?;
        for (d, c) in dest.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
    }
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    #[test]
    fn round_trip_is_f32_exact() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let mut p = HeadParams::init(HeadDims::new(5, 3, 4), &mut rng);
        p.bn3.running_var[1] = 2.5;
        let bytes = write_checkpoint(&p);
        let back = read_checkpoint(&bytes).unwrap();
        for ((n, _, a), (_, _, b)) in p.named_tensors().into_iter().zip(back.named_tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!((*x as f32) as f64, *y, "{n}");
            }
        }
        // a reloaded checkpoint serializes to the same bytes
        assert_eq!(write_checkpoint(&back), bytes);
    }

    #[test]
    fn descriptor_lists_tensors() {
        let p = HeadParams::zeros(HeadDims::new(2, 2, 2));
        let bytes = write_checkpoint(&p);
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
        assert_eq!(v["tensors"][0]["name"], "meta1.weight");
        assert_eq!(v["tensors"][0]["shape"], serde_json::json!([11, 2]));
        assert_eq!(v["tensors"].as_array().unwrap().len(), 20);
    }

    #[test]
    fn rejects_truncation() {
        let p = HeadParams::zeros(HeadDims::new(2, 2, 2));
        let bytes = write_checkpoint(&p);
        assert!(read_checkpoint(&bytes[..bytes.len() - 4]).is_err());
        assert!(read_checkpoint(b"nope").is_err());
    }
}
