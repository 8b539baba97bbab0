//! Checkpoint container: a JSON metadata header plus named parameter blobs.
//!
//! Layout (all integers little-endian u64 unless noted):
//!
//! ```text
//! magic   8 bytes  b"POPCKPT1"
//! dtype   1 byte   0 = f32, 1 = f64
//! meta    len + JSON bytes
//! count   number of parameters
//! entry*  name len + utf-8 name
//!         rank + dims
//!         byte len + little-endian scalar data
//! ```
//!
//! Entries are written in sorted-name order, so two checkpoints with the
//! same contents are byte-identical regardless of insertion history.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{PopError, Result};
use crate::param::ParamStore;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"POPCKPT1";

/// Write `store` (optionally restricted to names starting with `filter`)
/// with a caller-supplied JSON metadata value.
pub fn save<T: Scalar>(
    path: &Path,
    meta: &serde_json::Value,
    store: &ParamStore<T>,
    filter: Option<&str>,
) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&[T::DTYPE.tag()])?;
    let meta_bytes = serde_json::to_vec(meta)
        .map_err(|e| PopError::format(format!("checkpoint metadata serialization: {e}")))?;
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&meta_bytes)?;

    let names: Vec<String> = store
        .sorted_names()
        .into_iter()
        .filter(|n| filter.is_none_or(|f| n.starts_with(f)))
        .collect();
    w.write_all(&(names.len() as u64).to_le_bytes())?;
    for name in &names {
        let t = store.get(name)?;
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * T::DTYPE.byte_len());
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&(buf.len() as u64).to_le_bytes())?;
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Magic, dtype tag, and metadata block — everything before the
/// parameter payload.
fn read_header(r: &mut impl Read) -> Result<(Dtype, serde_json::Value)> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(PopError::format(format!(
            "not a checkpoint: bad magic {:?}",
            magic
        )));
    }
    let mut tag = [0u8; 1];
    read_exact(r, &mut tag, "dtype")?;
    let dtype = Dtype::from_tag(tag[0])
        .ok_or_else(|| PopError::format(format!("unknown dtype tag {}", tag[0])))?;

    let meta_len = read_u64(r, "metadata length")? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    read_exact(r, &mut meta_bytes, "metadata")?;
    let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)
        .map_err(|e| PopError::format(format!("checkpoint metadata parse: {e}")))?;
    Ok((dtype, meta))
}

/// Read a checkpoint's dtype and metadata without touching the parameter
/// payload (and without requiring the dtype to match any particular `T`).
pub fn read_meta(path: &Path) -> Result<(Dtype, serde_json::Value)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    read_header(&mut r)
}

/// Load a checkpoint written by [`save`]. The stored dtype must match `T`;
/// parameters come back frozen (callers opt parameters into training).
pub fn load<T: Scalar>(path: &Path) -> Result<(serde_json::Value, ParamStore<T>)> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let (dtype, meta) = read_header(&mut r)?;
    if dtype != T::DTYPE {
        return Err(PopError::format(format!(
            "checkpoint stores {dtype:?} but {:?} was requested",
            T::DTYPE
        )));
    }

    let count = read_u64(&mut r, "parameter count")? as usize;
    let mut store = ParamStore::new();
    let width = T::DTYPE.byte_len();
    for i in 0..count {
        let name_len = read_u64(&mut r, "name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| PopError::format(format!("parameter {i} name is not utf-8")))?;
        let rank = read_u64(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, "dimension")? as usize);
        }
        let byte_len = read_u64(&mut r, "data length")? as usize;
        let expect: usize = shape.iter().product::<usize>() * width;
        if byte_len != expect {
            return Err(PopError::format(format!(
                "parameter {name:?}: {byte_len} data bytes for shape {shape:?}"
            )));
        }
        let mut raw = vec![0u8; byte_len];
        read_exact(&mut r, &mut raw, "data")?;
        let data: Vec<T> = raw.chunks_exact(width).map(T::read_le).collect();
        store.insert(&name, Tensor::new(shape, data)?)?;
    }
    Ok((meta, store))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| PopError::format(format!("checkpoint truncated reading {what}")))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("zeta/w", Tensor::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap())
            .unwrap();
        s.insert("alpha/b", Tensor::full(vec![4], -1.5)).unwrap();
        s
    }

    #[test]
    fn round_trip_preserves_meta_shapes_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = sample_store();
        let meta = json!({"seed": 7, "dim": 64});
        save(&path, &meta, &store, None).unwrap();
        let (meta2, loaded) = load::<f32>(&path).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(loaded.sorted_names(), vec!["alpha/b", "zeta/w"]);
        for name in loaded.sorted_names() {
            assert_eq!(loaded.get(&name).unwrap().shape(), store.get(&name).unwrap().shape());
            assert_eq!(loaded.get(&name).unwrap().data(), store.get(&name).unwrap().data());
            assert!(!loaded.get(&name).unwrap().requires_grad);
        }
    }

    #[test]
    fn writes_are_byte_stable_across_insertion_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let mut s1 = ParamStore::new();
        s1.insert("x", Tensor::<f32>::full(vec![2], 1.0)).unwrap();
        s1.insert("y", Tensor::<f32>::full(vec![2], 2.0)).unwrap();
        let mut s2 = ParamStore::new();
        s2.insert("y", Tensor::<f32>::full(vec![2], 2.0)).unwrap();
        s2.insert("x", Tensor::<f32>::full(vec![2], 1.0)).unwrap();
        save(&a, &serde_json::Value::Null, &s1, None).unwrap();
        save(&b, &serde_json::Value::Null, &s2, None).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn prefix_filter_limits_saved_params() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ckpt");
        let store = sample_store();
        save(&path, &serde_json::Value::Null, &store, Some("alpha/")).unwrap();
        let (_, loaded) = load::<f32>(&path).unwrap();
        assert_eq!(loaded.sorted_names(), vec!["alpha/b"]);
    }

    #[test]
    fn bad_magic_and_truncation_are_named_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxx").unwrap();
        let err = load::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        let good = dir.path().join("good.ckpt");
        save(&good, &serde_json::Value::Null, &sample_store(), None).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load::<f32>(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn dtype_mismatch_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &serde_json::Value::Null, &sample_store(), None).unwrap();
        let err = load::<f64>(&path).unwrap_err().to_string();
        assert!(err.contains("F32") && err.contains("F64"), "{err}");
    }

    #[test]
    fn read_meta_skips_payload_and_dtype_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.ckpt");
        let meta = json!({"config_hash": "abc123"});
        save(&path, &meta, &sample_store(), None).unwrap();
        let (dtype, got) = read_meta(&path).unwrap();
        assert_eq!(dtype, Dtype::F32);
        assert_eq!(got, meta);
        // payload dtype never enters the picture
        assert!(load::<f64>(&path).is_err());
        assert!(read_meta(&path).is_ok());
    }
}
