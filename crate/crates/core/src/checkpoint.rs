//! Binary container for named arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"RRGN1\0"
//! u32     entry count
//! entry:  u32 name length, UTF-8 name bytes,
//!         u8 dtype (0 = f32), u32 ndim, ndim x u64 dims,
//!         prod(dims) x f32 row-major payload
//! ```
//!
//! Entries are written in name order, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fundus_nn::{ParamStore, Tensor};
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"RRGN1\0";
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    arrays: BTreeMap<String, ArrayD<f32>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: ArrayD<f32>) {
        self.arrays.insert(name.into(), array);
    }

    /// Stores an f64 tensor, rounding to f32.
    pub fn insert_f64(&mut self, name: impl Into<String>, t: &Tensor) {
        self.insert(name, t.mapv(|v| v as f32));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.arrays.get(name)
    }

    pub fn get_f64(&self, name: &str) -> Option<Tensor> {
        self.get(name).map(|a| a.mapv(f64::from))
    }

    /// Like [`Checkpoint::get_f64`] but a missing entry is a compatibility error.
    pub fn require(&self, name: &str) -> Result<Tensor> {
        self.get_f64(name)
            .ok_or_else(|| Error::Compatibility(format!("checkpoint has no array {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f32>)> {
        self.arrays.iter()
    }

    pub fn add_params(&mut self, store: &ParamStore) {
        for (name, p) in store.iter() {
            self.insert_f64(name.clone(), &p.value);
        }
    }

    /// Every array whose name starts with `prefix`, as trainable parameters.
    pub fn params(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, a) in self.arrays.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            store.insert(name.clone(), a.mapv(f64::from));
        }
        store
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.arrays.values().map(|a| a.len() * 4 + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            // iter() walks logical (row-major) order whatever the memory layout
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(format_err(0, "bad magic"));
        }
        let count = r.u32("entry count")?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| format_err(at + 4, "name is not UTF-8"))?
                .to_string();
            let dtype_at = r.pos;
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(format_err(dtype_at, format!("unknown dtype tag {dtype}")));
            }
            let ndim = r.u32("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u64("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| format_err(r.pos, "array size overflows"))?;
            let payload = r.take(numel, "payload")?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let array = ArrayD::from_shape_vec(IxDyn(&shape), data).expect("length checked above");
            if arrays.insert(name.clone(), array).is_some() {
                return Err(format_err(at, format!("duplicate entry {name:?}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(format_err(r.pos, "trailing bytes after last entry"));
        }
        Ok(Checkpoint { arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// `model.rrgn` keeps its configuration in `model.json` next to it.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_with_meta<T: serde::Serialize>(path: &Path, ckpt: &Checkpoint, meta: &T) -> Result<()> {
    ckpt.save(path)?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&side, e))
}

pub fn load_with_meta<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(Checkpoint, T)> {
    let ckpt = Checkpoint::load(path)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta = serde_json::from_str(&text).map_err(|e| Error::Compatibility(format!("{}: {e}", side.display())))?;
    Ok((ckpt, meta))
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format_err(self.pos, format!("truncated {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("b/w", ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -2.5, 3.0, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap());
        c.insert("a/scalar", ArrayD::from_elem(IxDyn(&[]), 4.0));
        c
    }

    #[test]
    fn layout_is_as_documented() {
        let mut c = Checkpoint::new();
        c.insert("x", ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0f32, 2.0]).unwrap());
        let b = c.to_bytes();
        let mut expected = b"RRGN1\0".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.push(b'x');
        expected.push(0);
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend(2.0f32.to_le_bytes());
        assert_eq!(b, expected);
    }

    #[test]
    fn round_trip_and_idempotent() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        let empty = Checkpoint::new();
        assert_eq!(Checkpoint::from_bytes(&empty.to_bytes()).unwrap(), empty);
    }

    #[test]
    fn reports_offsets() {
        let bytes = sample().to_bytes();
        let err = |b: &[u8]| match Checkpoint::from_bytes(b) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(err(&bad), 0);
        // last entry is "b/w" with a 24-byte payload
        assert_eq!(err(&bytes[..bytes.len() - 1]), bytes.len() - 24);
        // first entry is "a/scalar": dtype sits after magic, count, name length and name
        let dtype_at = 6 + 4 + 4 + "a/scalar".len();
        let mut bad = bytes.clone();
        bad[dtype_at] = 9;
        assert_eq!(err(&bad), dtype_at);
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(err(&long), bytes.len());
    }

    #[test]
    fn params_by_prefix() {
        let mut store = ParamStore::new();
        store.insert("vae/a", Tensor::from_elem(IxDyn(&[2]), 0.5));
        store.insert("vaex", Tensor::from_elem(IxDyn(&[1]), 1.0));
        store.insert("unet/b", Tensor::from_elem(IxDyn(&[1]), 2.0));
        let mut c = Checkpoint::new();
        c.add_params(&store);
        let vae = c.params("vae/");
        assert_eq!(vae.len(), 1);
        assert_eq!(vae.value("vae/a").unwrap()[[1]], 0.5);
    }
}
