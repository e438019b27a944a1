//! Named parameter storage with optimizer moment buffers and a binary
//! checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   b"PCHK"
//! version u32           (currently 1)
//! count   u64           number of parameters
//! repeat count times:
//!   name_len u32, name utf-8 bytes
//!   rank u32, extents u64 * rank
//!   data f64 * product(extents)
//! crc32   u32           over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io_util::{crc32, Cursor};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PCHK";
const VERSION: u32 = 1;

/// Named parameters plus Adam moment buffers and the step counter.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), value);
    }

    /// Insert a parameter drawn from `normal(0, std)`; the RNG stream is
    /// derived from `seed` and the parameter name so initialization does not
    /// depend on insertion order.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let dist = Normal::new(0.0, std).expect("valid std");
        let data: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| dist.sample(&mut rng))
            .collect();
        self.params
            .insert(name.to_string(), Tensor::new(shape.to_vec(), data).unwrap());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Moment buffers for a parameter, created zeroed on first use and
    /// shape-checked against the parameter thereafter.
    pub(crate) fn moments_mut(&mut self, name: &str) -> Result<(&mut Tensor, &mut Tensor)> {
        let shape = self
            .params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?
            .shape()
            .to_vec();
        let m = self
            .first_moment
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(&shape));
        if m.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "first moment of `{name}`: {:?} vs {:?}",
                m.shape(),
                shape
            )));
        }
        let v = self
            .second_moment
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(&shape));
        if v.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "second moment of `{name}`: {:?} vs {:?}",
                v.shape(),
                shape
            )));
        }
        Ok((
            self.first_moment.get_mut(name).unwrap(),
            self.second_moment.get_mut(name).unwrap(),
        ))
    }

    /// Serialize parameters (not optimizer state) to the checkpoint format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, tensor) in &self.params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
            for &e in tensor.shape() {
                buf.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 8 + 4 {
            return Err(Error::Truncated {
                needed: 20,
                available: bytes.len(),
            });
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        let computed = crc32(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut cur = Cursor::new(body);
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic(format!("{:?}", magic)));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let count = cur.u64()? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::InvalidInput("non-utf8 parameter name".into()))?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(cur.f64()?);
            }
            store.params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::new(vec![2, 3], vec![1.5, -2.0, 0.25, 0.0, 9.9, -7.0]).unwrap());
        store.insert_normal("b.w", &[4], 0.02, 42);
        let bytes = store.to_bytes();
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.get("a.w").unwrap(), store.get("a.w").unwrap());
        assert_eq!(back.get("b.w").unwrap(), store.get("b.w").unwrap());
    }

    #[test]
    fn checkpoint_detects_corruption() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![1.0, 2.0]));
        let mut bytes = store.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(matches!(
            ParamStore::from_bytes(&bytes),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn checkpoint_detects_version_mismatch() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![1.0]));
        let mut bytes = store.to_bytes();
        bytes[4] = 9; // version field
        let body_len = bytes.len() - 4;
        let crc = crc32(&bytes[..body_len]).to_le_bytes();
        bytes[body_len..].copy_from_slice(&crc);
        assert!(matches!(
            ParamStore::from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn init_is_insertion_order_independent() {
        let mut a = ParamStore::new();
        a.insert_normal("x", &[8], 0.02, 7);
        a.insert_normal("y", &[8], 0.02, 7);
        let mut b = ParamStore::new();
        b.insert_normal("y", &[8], 0.02, 7);
        b.insert_normal("x", &[8], 0.02, 7);
        assert_eq!(a.get("x").unwrap(), b.get("x").unwrap());
        assert_eq!(a.get("y").unwrap(), b.get("y").unwrap());
    }
}
