//! Named parameter tensors and their JSON checkpoint format.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{ParamGroup, ParamId, Tape, Var};
use crate::matrix::Matrix;

pub const CHECKPOINT_FORMAT: &str = "btgperm-params";
pub const CHECKPOINT_VERSION: u32 = 1;

/// An ordered collection of named tensors belonging to one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    group: ParamGroup,
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl ParamStore {
    pub fn new(group: ParamGroup) -> Self {
        Self { group, names: Vec::new(), tensors: Vec::new() }
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    /// Adds a `rows × cols` tensor drawn uniformly from `±1/√fan_in`.
    pub fn add_uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.add(name, Matrix::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, index: usize) -> ParamId {
        ParamId { group: self.group, index }
    }

    pub fn get(&self, index: usize) -> &Matrix {
        &self.tensors[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Matrix {
        &mut self.tensors[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Records every tensor on `tape`; the returned handles are indexed like the store.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().enumerate().map(|(i, t)| tape.param(self.id(i), t)).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.as_slice().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat parameter length mismatch");
        let mut off = 0;
        for t in &mut self.tensors {
            let len = t.len();
            t.as_mut_slice().copy_from_slice(&flat[off..off + len]);
            off += len;
        }
    }

    fn to_records(&self, prefix: &str) -> Vec<TensorRecord> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| TensorRecord {
                name: format!("{prefix}.{name}"),
                shape: [t.rows(), t.cols()],
                data: t.as_slice().to_vec(),
            })
            .collect()
    }

    /// Overwrites tensors from checkpoint records named `prefix.<name>`.
    fn load_records(&mut self, prefix: &str, records: &[TensorRecord]) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let full = format!("{prefix}.{name}");
            let rec = records
                .iter()
                .find(|r| r.name == full)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
            if rec.shape != [t.rows(), t.cols()] || rec.data.len() != t.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {full} has shape {:?}, expected {:?}",
                    rec.shape,
                    t.shape()
                )));
            }
            t.as_mut_slice().copy_from_slice(&rec.data);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// On-disk checkpoint: a versioned list of named tensors plus free-form
/// metadata (the model configuration).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_stores(meta: serde_json::Value, stores: &[(&str, &ParamStore)]) -> Self {
        let tensors = stores.iter().flat_map(|(prefix, s)| s.to_records(prefix)).collect();
        Self { format: CHECKPOINT_FORMAT.to_string(), version: CHECKPOINT_VERSION, meta, tensors }
    }

    pub fn restore(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        store.load_records(prefix, &self.tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        Ok(ck)
    }
}
