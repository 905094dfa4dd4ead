//! Binary checkpoint of one or more parameter stores.
//!
//! Layout: the magic line `ICILCKPT\n`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every parameter's values as little-endian
//! `f64` in row-major order, in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::array::Array;
use super::params::ParameterStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"ICILCKPT\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: serde_json::Value,
    stores: Vec<StoreHeader>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreHeader {
    name: String,
    params: Vec<ParamHeader>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

/// Named stores plus free-form metadata, as read back from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub stores: Vec<(String, ParameterStore)>,
}

impl Checkpoint {
    pub fn store(&self, name: &str) -> Result<&ParameterStore> {
        self.stores
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no store `{name}`")))
    }
}

pub fn encode(meta: &serde_json::Value, stores: &[(&str, &ParameterStore)]) -> Result<Vec<u8>> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        meta: meta.clone(),
        stores: stores
            .iter()
            .map(|(name, s)| StoreHeader {
                name: name.to_string(),
                params: s.iter().map(|(n, p)| ParamHeader { name: n.to_string(), shape: p.value.shape().to_vec() }).collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, s) in stores {
        for (_, p) in s.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
    let mut r = bytes;
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a parameter checkpoint"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
    let len = u64::from_le_bytes(len) as usize;
    if r.len() < len {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&r[..len])?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported format version {}", header.format_version)));
    }
    r = &r[len..];
    let mut stores = Vec::with_capacity(header.stores.len());
    for sh in header.stores {
        let mut store = ParameterStore::new();
        for ph in sh.params {
            let n: usize = ph.shape.iter().product();
            if r.len() < n * 8 {
                return Err(bad(&format!("payload of `{}` truncated", ph.name)));
            }
            let data = r[..n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            r = &r[n * 8..];
            store.insert(ph.name, Array::new(ph.shape, data)?)?;
        }
        stores.push((sh.name, store));
    }
    if !r.is_empty() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(Checkpoint { meta: header.meta, stores })
}

pub fn save(path: &Path, meta: &serde_json::Value, stores: &[(&str, &ParameterStore)]) -> Result<()> {
    let bytes = encode(meta, stores)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40),
            cols in 1usize..5,
        ) {
            let rows = vals.len().div_ceil(cols);
            let mut data = vals.clone();
            data.resize(rows * cols, -0.0);
            let mut s = ParameterStore::new();
            s.insert("a.w0", Array::matrix(rows, cols, data).unwrap()).unwrap();
            s.insert("a.b0", Array::scalar(vals[0])).unwrap();
            let meta = serde_json::json!({"kind": "test"});
            let bytes = encode(&meta, &[("main", &s)]).unwrap();
            let back = decode(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(&back.meta, &meta);
            prop_assert!(back.store("main").unwrap().values_bit_equal(&s));
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"nope", Path::new("x")).is_err());
        let mut s = ParameterStore::new();
        s.insert("p", Array::scalar(1.0)).unwrap();
        let mut bytes = encode(&serde_json::Value::Null, &[("s", &s)]).unwrap();
        bytes.pop();
        assert!(decode(&bytes, Path::new("x")).is_err());
    }
}
