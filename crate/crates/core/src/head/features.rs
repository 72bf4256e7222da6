//! Precomputed CNN feature vectors.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "DFV1"
//! u32 image count | u32 feature dim F | u32 replicates R
//! image count x { u32 byte length, UTF-8 image id }
//! image count x R x F f32, in index order
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};

use super::HeadError;

pub const FEATURE_MAGIC: &[u8; 4] = b"DFV1";

/// Per-image feature replicates of a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    replicates: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

fn format_err(reason: impl Into<String>) -> HeadError {
    HeadError::Format {
        what: "feature file",
        reason: reason.into(),
    }
}

impl FeatureStore {
    /// `data` holds `ids.len() * replicates * dim` values in index order.
    pub fn new(
        dim: usize,
        replicates: usize,
        ids: Vec<String>,
        data: Vec<f32>,
    ) -> Result<Self, HeadError> {
        if dim == 0 || replicates == 0 {
            return Err(format_err("feature dimension and replicate count must be >= 1"));
        }
        if data.len() != ids.len() * replicates * dim {
            return Err(format_err(format!(
                "{} values for {} images x {replicates} replicates x {dim} features",
                data.len(),
                ids.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(format_err(format!(
                "non-finite value for image `{}`",
                ids[i / (replicates * dim)]
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(format_err(format!("duplicate image id `{id}`")));
            }
        }
        Ok(Self {
            dim,
            replicates,
            ids,
            index,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn replicates(&self) -> usize {
        self.replicates
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Replicate `r` of image `id`.
    pub fn get(&self, id: &str, r: usize) -> Option<&[f32]> {
        let i = *self.index.get(id)?;
        if r >= self.replicates {
            return None;
        }
        let start = (i * self.replicates + r) * self.dim;
        Some(&self.data[start..start + self.dim])
    }

    /// Ids from `wanted` that have no features, in input order.
    pub fn missing<'a>(&self, wanted: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        wanted
            .into_iter()
            .filter(|id| !self.contains(id))
            .map(str::to_string)
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), HeadError> {
        w.write_all(FEATURE_MAGIC)?;
        for n in [self.ids.len(), self.dim, self.replicates] {
            w.write_all(&u32::try_from(n).map_err(|_| format_err("count exceeds u32"))?.to_le_bytes())?;
        }
        for id in &self.ids {
            let len = u32::try_from(id.len()).map_err(|_| format_err("image id too long"))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, HeadError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| format_err("truncated header"))?;
        if &magic != FEATURE_MAGIC {
            return Err(format_err("bad magic, expected DFV1"));
        }
        let read_u32 = |r: &mut R| -> Result<usize, HeadError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| format_err("truncated file"))?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let count = read_u32(&mut r)?;
        let dim = read_u32(&mut r)?;
        let replicates = read_u32(&mut r)?;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = read_u32(&mut r)?;
            let mut b = vec![0u8; len];
            r.read_exact(&mut b).map_err(|_| format_err("truncated index"))?;
            ids.push(String::from_utf8(b).map_err(|_| format_err("image id is not UTF-8"))?);
        }
        let n = count
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(replicates))
            .ok_or_else(|| format_err("header sizes overflow"))?;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        if raw.len() != n * 4 {
            return Err(format_err(format!("expected {} payload bytes, found {}", n * 4, raw.len())));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(dim, replicates, ids, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> FeatureStore {
        let ids = vec!["a".to_string(), "bé".to_string()];
        let data = (0..2 * 3 * 4).map(|i| i as f32 * 0.5 - 3.0).collect();
        FeatureStore::new(4, 3, ids, data).unwrap()
    }

    #[test]
    fn layout_and_lookup() {
        let s = store();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"DFV1");
        assert_eq!(&bytes[4..16], &[2, 0, 0, 0, 4, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[16..21], &[1, 0, 0, 0, b'a']);
        assert_eq!(bytes.len(), 16 + 5 + 4 + 3 + 24 * 4);
        assert_eq!(s.get("bé", 1).unwrap(), &[5.0, 5.5, 6.0, 6.5]);
        assert_eq!(s.get("bé", 3), None);
        assert_eq!(FeatureStore::read_from(bytes.as_slice()).unwrap(), s);
        assert_eq!(s.missing(["a", "zz"]), vec!["zz".to_string()]);
    }

    #[test]
    fn rejects_corrupt_files() {
        let mut bytes = store().to_bytes();
        bytes.pop();
        assert!(FeatureStore::read_from(bytes.as_slice()).is_err());
        let mut bad = store().to_bytes();
        bad[0] = b'X';
        assert!(FeatureStore::read_from(bad.as_slice()).is_err());
        assert!(FeatureStore::new(1, 1, vec!["x".into()], vec![f32::NAN]).is_err());
    }
}
