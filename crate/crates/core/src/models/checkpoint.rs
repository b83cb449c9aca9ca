//! `SSMP` binary checkpoint of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SSMP"                magic
//! u32                   version (1)
//! u64                   record count
//! per record:
//!   u32                 name length in bytes
//!   [u8]                UTF-8 name
//!   u32                 rank
//!   [u64; rank]         dims
//!   [f64; Π dims]       row-major data
//! ```
//!
//! Model specifications are not stored separately: they are recovered from
//! tensor names and shapes plus two `meta.observation.*` records.

use super::{ModelError, ModelParameters, ObservationSpec, TransitionSpec};
use crate::autodiff::Tensor;
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSMP";
pub const CHECKPOINT_VERSION: u32 = 1;

const META_PROJECTION: &str = "meta.observation.projection";
const META_SIGMOID: &str = "meta.observation.sigmoid";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = read_u64(r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name =
                String::from_utf8(name).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            let rank = read_u32(r)? as usize;
            if rank == 0 || rank > 8 {
                return Err(CheckpointError::Malformed(format!(
                    "tensor `{name}` has rank {rank}"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t =
                Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut r)
    }

    /// Appends every model tensor plus the observation metadata.
    pub fn push_model(&mut self, params: &ModelParameters) {
        for t in params.tensors() {
            self.push(t.name.clone(), t.var.value.clone());
        }
        match params.observation_spec() {
            ObservationSpec::Projection { indices } => {
                let idx: Vec<f64> = indices.iter().map(|&i| i as f64).collect();
                self.push(META_PROJECTION, Tensor::vector(&idx));
            }
            ObservationSpec::MlpDecoder { sigmoid, .. } => {
                self.push(
                    META_SIGMOID,
                    Tensor::scalar(if *sigmoid { 1.0 } else { 0.0 }),
                );
            }
        }
    }

    fn shape_of(&self, name: &str) -> Option<&[usize]> {
        self.get(name).map(Tensor::shape)
    }

    fn dense_chain(&self, prefix: &str) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        while let Some(s) = self.shape_of(&format!("{prefix}.{}.weight", dims.len())) {
            if s.len() != 2 {
                break;
            }
            dims.push((s[0], s[1]));
        }
        dims
    }

    /// Recovers the transition and observation specifications from names
    /// and shapes.
    pub fn model_specs(&self) -> Result<(TransitionSpec, ObservationSpec), CheckpointError> {
        let malformed = |m: &str| CheckpointError::Malformed(m.to_string());
        let transition = if let Some(s) = self.shape_of("transition.ll.beta.0.weight") {
            let (d, hidden) = (s[0], s[1]);
            let maps = self
                .shape_of("transition.ll.beta.1.weight")
                .ok_or_else(|| malformed("missing mixture output layer"))?[1];
            TransitionSpec::LocallyLinear {
                state_dim: d,
                maps,
                hidden,
            }
        } else {
            let dims = self.dense_chain("transition.fc");
            let (first, last) = match (dims.first(), dims.last()) {
                (Some(f), Some(l)) => (*f, *l),
                _ => return Err(malformed("no transition tensors")),
            };
            if first.0 != last.1 {
                return Err(malformed("fully connected transition is not square"));
            }
            TransitionSpec::FullyConnected {
                state_dim: first.0,
                hidden: dims[..dims.len() - 1].iter().map(|d| d.1).collect(),
            }
        };
        let observation = if let Some(t) = self.get(META_PROJECTION) {
            ObservationSpec::Projection {
                indices: t.data().iter().map(|&v| v as usize).collect(),
            }
        } else {
            let dims = self.dense_chain("observation.decoder");
            let last = dims
                .last()
                .ok_or_else(|| malformed("no observation tensors"))?;
            let sigmoid = self.get(META_SIGMOID).is_none_or(|t| t.data()[0] != 0.0);
            ObservationSpec::MlpDecoder {
                hidden: dims[..dims.len() - 1].iter().map(|d| d.1).collect(),
                output_dim: last.1,
                sigmoid,
            }
        };
        Ok((transition, observation))
    }

    pub fn to_model(&self) -> Result<ModelParameters, CheckpointError> {
        let (t, o) = self.model_specs()?;
        Ok(ModelParameters::from_named(t, o, &self.tensors)?)
    }
}
