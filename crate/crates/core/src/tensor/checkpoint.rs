//! Binary parameter files: the 8-byte magic `MCAFJSP1`, a little-endian
//! `u64` manifest length, a JSON manifest
//! `{"tensors": [{name, shape, dtype}], "config": ...}` and the raw
//! little-endian `f64` arrays in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MCAFJSP1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<Entry>,
    #[serde(default)]
    config: Value,
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, config: &Value) -> Result<()> {
    let manifest = Manifest {
        tensors: store
            .iter()
            .map(|(_, name, t)| Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
            })
            .collect(),
        config: config.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * store.num_scalars());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, t) in store.iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, Value)> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    let mut store = ParamStore::new();
    let mut off = 16 + len;
    for e in manifest.tensors {
        if e.dtype != "f64" {
            return Err(bad(&format!("unsupported dtype {}", e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let raw = bytes
            .get(off..off + 8 * n)
            .ok_or_else(|| bad(&format!("truncated data for {}", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(e.name, Tensor::new(e.shape, data)?)?;
        off += 8 * n;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((store, manifest.config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap())
            .unwrap();
        s.add("b", Tensor::new(vec![3], vec![0.0, f64::MIN_POSITIVE, 7.0]).unwrap())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let cfg = serde_json::json!({"d_model": 8});
        save_checkpoint(&p, &s, &cfg).unwrap();
        let (back, c) = load_checkpoint(&p).unwrap();
        assert_eq!(c, cfg);
        assert_eq!(back.by_name("a").unwrap().data(), s.by_name("a").unwrap().data());
        assert_eq!(back.by_name("b").unwrap().shape(), &[3]);

        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
        fs::write(&p, b"NOTMAGIC").unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
