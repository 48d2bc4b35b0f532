//! Weight persistence in the `SDEW` container.
//!
//! Layout, all integers little-endian: magic `SDEW`, `u32` version, `u64` spec
//! hash, `u32` tensor count; per tensor a `u16` name length, the UTF-8 name, a
//! `u8` rank, `rank × u32` extents and the `f32` data. Tensors are written in
//! name order, so equal stores always serialize to equal bytes.

use super::model::Model;
use super::spec::NetworkSpec;
use crate::error::config_err;
use crate::nn::Params;
use crate::{Error, Result, Scalar, Tensor};
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SDEW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub spec_hash: u64,
    /// Init seed, when the store was produced in this process. Not persisted.
    pub seed: Option<u64>,
}

impl WeightStore {
    pub fn from_model<T: Scalar>(model: &Model<T>) -> Self {
        let mut tensors = BTreeMap::new();
        model.visit("", &mut |name, t| {
            tensors.insert(name, t.cast::<f32>());
        });
        Self { tensors, spec_hash: model.spec_hash(), seed: None }
    }

    /// Seeded random weights for `spec`.
    pub fn seeded(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let model = Model::<f32>::new(spec.clone(), seed)?;
        Ok(Self { seed: Some(seed), ..Self::from_model(&model) })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.spec_hash.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank too large for {name}")))?;
            out.push(rank);
            for &e in t.shape() {
                let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent too large in {name}")))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a weights file (magic is not SDEW)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported weights version {version}")));
        }
        let spec_hash = r.u64("spec hash")?;
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Parse { offset: at, msg: "tensor name is not UTF-8".into() })?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Parse { offset: at, msg: format!("tensor '{name}': {e}") })?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Parse { offset: at, msg: format!("duplicate tensor '{name}'") });
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse { offset: r.pos, msg: format!("{} trailing bytes", bytes.len() - r.pos) });
        }
        Ok(Self { tensors, spec_hash, seed: None })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Parse {
            offset: self.pos,
            msg: format!("file ends inside {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, store.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightStore::from_bytes(&bytes)
}

/// A model for `spec` with every tensor taken from `store`.
pub fn build_model<T: Scalar>(spec: &NetworkSpec, store: &WeightStore) -> Result<Model<T>> {
    let hash = spec.hash();
    if store.spec_hash != hash {
        return Err(config_err!("spec hash mismatch: weights were saved for {:016x}, spec is {hash:016x}", store.spec_hash));
    }
    let mut model = Model::<T>::new(spec.clone(), 0)?;
    let mut seen = HashSet::new();
    let mut failure = None;
    model.visit_mut("", &mut |name, t| {
        if failure.is_some() {
            return;
        }
        match store.tensors.get(&name) {
            None => failure = Some(config_err!("missing weight tensor '{name}'")),
            Some(src) if src.shape() != t.shape() => {
                failure = Some(config_err!("weight '{name}': model expects {:?}, store has {:?}", t.shape(), src.shape()))
            }
            Some(src) => *t = src.cast::<T>(),
        }
        seen.insert(name);
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = store.tensors.keys().find(|k| !seen.contains(*k)) {
        return Err(config_err!("unexpected weight tensor '{extra}'"));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> WeightStore {
        let mut tensors = BTreeMap::new();
        tensors.insert("b".to_string(), Tensor::from_f64(&[2], &[1.5, -2.0]).unwrap());
        tensors.insert("a.w".to_string(), Tensor::from_f64(&[1, 2, 1], &[0.25, f64::from(f32::MIN_POSITIVE)]).unwrap());
        WeightStore { tensors, spec_hash: 0xDEAD_BEEF_0123_4567, seed: None }
    }

    #[test]
    fn byte_layout() {
        let b = tiny().to_bytes().unwrap();
        assert_eq!(&b[..4], b"SDEW");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 0xDEAD_BEEF_0123_4567);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 2);
        // sorted: "a.w" first
        assert_eq!(u16::from_le_bytes(b[20..22].try_into().unwrap()), 3);
        assert_eq!(&b[22..25], b"a.w");
        assert_eq!(b[25], 3);
        assert_eq!(b.len(), 20 + (2 + 3 + 1 + 12 + 8) + (2 + 1 + 1 + 4 + 8));
    }

    #[test]
    fn round_trip_and_errors() {
        let s = tiny();
        let bytes = s.to_bytes().unwrap();
        assert_eq!(WeightStore::from_bytes(&bytes).unwrap(), s);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(WeightStore::from_bytes(&bad), Err(Error::Format(_))));

        let cut = &bytes[..bytes.len() - 3];
        match WeightStore::from_bytes(cut) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 20 && offset < bytes.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
