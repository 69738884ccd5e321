//! Named parameter store.
//!
//! Layers refer to parameters by dense [`ParamId`]; names exist for
//! checkpoints and error messages and must be unique.

use super::{NnError, Tensor4};
use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

pub type ParamId = usize;

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor4)>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name.
    pub fn add(&mut self, name: &str, tensor: Tensor4) -> Result<ParamId, NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let id = self.entries.len();
        self.entries.push((name.to_string(), tensor));
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NnError> {
        self.index.get(name).copied().ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].0
    }

    pub fn get(&self, id: ParamId) -> &Tensor4 {
        &self.entries[id].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor4 {
        &mut self.entries[id].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in registration order (the checkpoint order).
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor4)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}
