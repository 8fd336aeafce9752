//! Named parameter collections.
//!
//! Checkpoints serialize a [`ParamSet`] as a flat, ordered list of named
//! arrays; field order is fixed by the structs, so the JSON is byte-stable
//! across runs that produce identical values.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{CshockError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(CshockError::InvalidArgument(format!(
                "duplicate parameter name '{}'",
                name
            )));
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            trainable,
            tensor,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|e| e.name == name)
            .map(|e| &mut e.tensor)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn trainable_entries(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter().filter(|e| e.trainable)
    }

    pub fn trainable_entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut().filter(|e| e.trainable)
    }

    /// Total number of trainable scalar values.
    pub fn trainable_len(&self) -> usize {
        self.trainable_entries().map(|e| e.tensor.len()).sum()
    }

    /// Flatten trainable parameters into one vector (entry order).
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for e in self.trainable_entries() {
            out.extend_from_slice(e.tensor.data());
        }
        out
    }

    /// Overwrite trainable parameters from a flat vector (entry order).
    pub fn load_trainable(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.trainable_len() {
            return Err(CshockError::Shape(format!(
                "flat vector has {} values, trainable parameters need {}",
                flat.len(),
                self.trainable_len()
            )));
        }
        let mut offset = 0;
        for e in self.trainable_entries_mut() {
            let n = e.tensor.len();
            e.tensor.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}
