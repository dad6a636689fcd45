//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"CCAPCKPT"
//! version  u32
//! count    u32
//! count records, sorted by name:
//!   name_len u32, name (UTF-8), rank u32, dims u64 x rank, data f64 x numel
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CCAPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    /// Weight initialised from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.insert(name, Tensor::uniform(shape, bound, rng))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// FNV-1a over names, shapes and the raw bits of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (_, name, t) in self.iter() {
            eat(name.as_bytes());
            for d in t.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, &i) in &self.index {
            let t = &self.tensors[i];
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Overwrites every parameter from a checkpoint. The checkpoint must hold
    /// exactly this store's names with identical shapes.
    pub fn read_checkpoint<R: Read>(&mut self, mut r: R) -> Result<()> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        if count != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {count} tensors, model expects {}",
                self.len()
            )));
        }
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u64(&mut r)? as usize);
            }
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let target = &mut self.tensors[id.0];
            if target.shape() != dims.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {dims:?}, model shape {:?}",
                    target.shape()
                )));
            }
            let mut buf = [0u8; 8];
            for v in target.data_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
