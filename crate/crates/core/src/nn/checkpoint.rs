//! Versioned binary checkpoint: magic, version, JSON header, raw little-endian f64.
//!
//! Layout: `CLRMNN\0\0` | u32 version | u64 header length | header JSON |
//! values of every entry in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ParamEntry, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CLRMNN\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: serde_json::Value,
    pub entries: Vec<ParamEntry>,
    pub trainable_count: usize,
}

impl Manifest {
    pub fn of(store: &ParamStore, config: serde_json::Value) -> Self {
        Manifest {
            version: VERSION,
            config,
            entries: store.entries.clone(),
            trainable_count: store.trainable_count(),
        }
    }
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, config: serde_json::Value) -> Result<()> {
    let header = serde_json::to_vec(&Manifest::of(store, config))?;
    let mut buf =
        Vec::with_capacity(20 + header.len() + 8 * store.entries.iter().map(|e| e.value.len()).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for e in &store.entries {
        for v in &e.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20 + hlen;
    if bytes.len() < body {
        return Err(Error::format(path, "truncated header"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[20..body])?;
    let total: usize = manifest.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() != body + 8 * total {
        return Err(Error::format(path, "payload size does not match manifest"));
    }
    let mut store = ParamStore::new();
    let mut off = body;
    for e in manifest.entries {
        let n: usize = e.shape.iter().product();
        let value = bytes[off..off + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        off += 8 * n;
        store.add(&e.name, e.shape, value, e.trainable)?;
    }
    Ok((store, manifest.config))
}

pub fn write_manifest_json(path: &Path, store: &ParamStore, config: serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(&Manifest::of(store, config))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_flags() {
        let mut s = ParamStore::new();
        s.add("a", vec![2, 2], vec![1.0, -2.5, 1e-300, f64::MAX], true).unwrap();
        s.add("running", vec![3], vec![0.1, 0.2, 0.3], false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &s, serde_json::json!({"n": 3})).unwrap();
        let (back, cfg) = load_checkpoint(&p).unwrap();
        assert_eq!(back, s);
        assert_eq!(cfg["n"], 3);

        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(load_checkpoint(&p).is_err());
        std::fs::write(&p, b"garbage").unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
