//! Binary checkpoint format: "PRGC" magic, format version, then named
//! parameter entries with shapes and single-precision values, little-endian.
//! Values are quantized to f32 at save time only; computation stays f64.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PRGC";
const VERSION: u32 = 1;

/// Serialize stores under `<store>/<param>` entry names, in deterministic
/// order.
pub fn save_checkpoint(path: &Path, stores: &[(&str, &ParamStore)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count: usize = stores.iter().map(|(_, s)| s.len()).sum();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (prefix, store) in stores {
        for (name, tensor) in store.entries() {
            let full = format!("{prefix}/{name}");
            out.extend_from_slice(&(full.len() as u32).to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn err(&self, detail: String) -> Error {
        Error::Parse {
            path: self.path.clone(),
            detail,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Read every entry of a checkpoint into a name -> tensor map.
pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        at: 0,
        path: path.display().to_string(),
    };
    if cur.take(4, "magic")? != MAGIC {
        return Err(cur.err("bad magic, not a checkpoint".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(cur.err(format!("unsupported checkpoint version {version}")));
    }
    let count = cur.u32("entry count")? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name = String::from_utf8(cur.take(name_len, "entry name")?.to_vec())
            .map_err(|_| cur.err("non-utf8 entry name".into()))?;
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let s = cur.take(4, "values")?;
            data.push(f32::from_le_bytes(s.try_into().unwrap()) as f64);
        }
        map.insert(name, Tensor::new(&shape, data)?);
    }
    if cur.at != bytes.len() {
        return Err(cur.err("trailing bytes after last entry".into()));
    }
    Ok(map)
}

/// Load checkpoint entries into existing stores; every parameter already in
/// a store must be present under `<store>/<param>` with a matching shape.
pub fn load_into(path: &Path, stores: &mut [(&str, &mut ParamStore)]) -> Result<()> {
    let map = load_checkpoint(path)?;
    for (prefix, store) in stores.iter_mut() {
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let full = format!("{prefix}/{name}");
            let loaded = map
                .get(&full)
                .ok_or_else(|| Error::MissingParam(full.clone()))?;
            let dst = store.get_mut(&name)?;
            if dst.shape() != loaded.shape() {
                return Err(Error::InvalidInput(format!(
                    "checkpoint entry `{full}` has shape {:?}, expected {:?}",
                    loaded.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(loaded.data());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.insert(
            "layer.w",
            Tensor::new(&[3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        );
        store.insert(
            "layer.b",
            Tensor::new(&[2], vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).unwrap(),
        );
        store
    }

    #[test]
    fn roundtrip_to_single_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let a = toy_store(1);
        let b = toy_store(2);
        save_checkpoint(&path, &[("a", &a), ("b", &b)]).unwrap();
        let mut a2 = toy_store(3);
        let mut b2 = toy_store(4);
        load_into(&path, &mut [("a", &mut a2), ("b", &mut b2)]).unwrap();
        for (orig, loaded) in [(&a, &a2), (&b, &b2)] {
            for ((_, t0), (_, t1)) in orig.entries().zip(loaded.entries()) {
                for (x, y) in t0.data().iter().zip(t1.data()) {
                    assert_eq!(*x as f32, *y as f32);
                    assert_eq!(*y, (*y as f32) as f64); // quantized exactly
                }
            }
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.ckpt");
        let p2 = dir.path().join("two.ckpt");
        let store = toy_store(9);
        save_checkpoint(&p1, &[("m", &store)]).unwrap();
        let mut reloaded = toy_store(10);
        load_into(&p1, &mut [("m", &mut reloaded)]).unwrap();
        save_checkpoint(&p2, &[("m", &reloaded)]).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn missing_entry_names_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let store = toy_store(0);
        save_checkpoint(&path, &[("m", &store)]).unwrap();
        let mut other = ParamStore::new();
        other.insert("extra.w", Tensor::zeros(&[2]));
        let err = load_into(&path, &mut [("m", &mut other)]).unwrap_err();
        assert!(err.to_string().contains("m/extra.w"), "{err}");
    }

    #[test]
    fn garbage_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
        fs::write(&path, b"PRG").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
