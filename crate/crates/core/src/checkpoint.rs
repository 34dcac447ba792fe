//! The FGNT checkpoint format.
//!
//! ```text
//! "FGNT" | version u8 = 1 | tensor count u32
//! per tensor: name length u32 | UTF-8 name | dtype u8 (0 = f32, 1 = f64)
//!             | rank u8 | rank × extent u64 | row-major values
//! provenance length u32 | UTF-8 JSON
//! ```
//!
//! All integers and values are little-endian. Tensors are stored in model
//! parameter order, so two saves of one model are byte-identical.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::models::{build_model_with, ArchitectureId, ModelGraph, ModelSpec};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: [u8; 4] = *b"FGNT";
pub const VERSION: u8 = 1;

/// Where the weights came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub architecture: ArchitectureId,
    pub num_classes: usize,
    pub seed: u64,
    #[serde(default = "one")]
    pub width_divisor: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    /// Float32 view; float64 values are rounded.
    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            StoredTensor::F32(t) => t.detach(),
            StoredTensor::F64(t) => t.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, StoredTensor)>,
    pub provenance: Provenance,
}

impl Checkpoint {
    /// Every model parameter and buffer, as float32.
    pub fn from_model(model: &ModelGraph, seed: u64) -> Result<Self> {
        let mut tensors = Vec::with_capacity(model.parameters().len());
        for (name, t) in model.named_state() {
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("parameter `{name}`")));
            }
            tensors.push((name.to_string(), StoredTensor::F32(t.detach())));
        }
        let provenance = Provenance {
            architecture: model.architecture(),
            num_classes: model.num_classes(),
            seed,
            width_divisor: model.width_divisor(),
        };
        Ok(Checkpoint { tensors, provenance })
    }

    pub fn weights(&self) -> BTreeMap<String, Tensor<f32>> {
        self.tensors.iter().map(|(n, t)| (n.clone(), t.to_f32())).collect()
    }

    /// Builds the architecture named by the provenance and loads every tensor
    /// into it.
    pub fn to_model(&self) -> Result<ModelGraph> {
        let p = &self.provenance;
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut model = build_model_with(p.architecture, ModelSpec::reduced(p.num_classes, p.width_divisor), &mut rng)?;
        model.apply_weights(&self.weights(), true)?;
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&u32_len(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&u32_len(name.len(), "name length")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Contract(format!("tensor `{name}` has rank above 255")))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => out.extend_from_slice(&f32::to_le_bytes_vec(t.data())),
                StoredTensor::F64(t) => out.extend_from_slice(&f64::to_le_bytes_vec(t.data())),
            }
        }
        let json = serde_json::to_vec(&self.provenance)?;
        out.extend_from_slice(&u32_len(json.len(), "provenance length")?.to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || bytes[..4] != MAGIC {
            return Err(Error::NotACheckpoint);
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        let mut r = Reader { bytes, pos: 5 };
        let count = r.u32("the tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        let mut names = HashSet::new();
        for i in 0..count {
            let what = format!("the header of tensor #{i}");
            let len = r.u32(&what)? as usize;
            let name = std::str::from_utf8(r.take(len, &what)?)
                .map_err(|_| Error::CorruptCheckpoint(format!("name of tensor #{i} is not UTF-8")))?
                .to_string();
            let record = format!("tensor `{name}`");
            if !names.insert(name.clone()) {
                return Err(Error::CorruptCheckpoint(format!("{record} appears twice")));
            }
            let code = r.u8(&record)?;
            let dtype = DType::from_code(code).ok_or_else(|| Error::CorruptCheckpoint(format!("{record} has unknown dtype code {code}")))?;
            let rank = r.u8(&record)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u64(&record)?;
                shape.push(usize::try_from(d).map_err(|_| Error::CorruptCheckpoint(format!("{record} has extent {d}")))?);
            }
            let bytes_needed = shape
                .iter()
                .try_fold(dtype.size_of(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("{record} declares an impossible size")))?;
            let raw = r.take(bytes_needed, &record)?;
            let tensor = match dtype {
                DType::F32 => StoredTensor::F32(Tensor::from_vec(f32::from_le_bytes_slice(raw), &shape)?),
                DType::F64 => StoredTensor::F64(Tensor::from_vec(f64::from_le_bytes_slice(raw), &shape)?),
            };
            tensors.push((name, tensor));
        }
        let len = r.u32("the provenance block")? as usize;
        let json = r.take(len, "the provenance block")?;
        let provenance: Provenance =
            serde_json::from_slice(json).map_err(|e| Error::CorruptCheckpoint(format!("provenance block: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("{} unexpected bytes after the provenance block", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { tensors, provenance })
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Contract(format!("{what} {n} does not fit the checkpoint format")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::CorruptCheckpoint(format!(
                "{what} is truncated: needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        };
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Writes `model` atomically; `seed` is recorded in the provenance block.
pub fn save_checkpoint(model: &ModelGraph, seed: u64, path: &Path) -> Result<()> {
    let bytes = Checkpoint::from_model(model, seed)?.encode()?;
    write_atomic(path, |w| Ok(w.write_all(&bytes)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}
