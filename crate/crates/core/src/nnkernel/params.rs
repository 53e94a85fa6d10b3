use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

/// One named tensor plus its optimizer moments.
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers such as batchnorm running statistics are stored alongside the
    /// weights but are never touched by the optimizer.
    pub trainable: bool,
    pub(crate) first_moment: Vec<f32>,
    pub(crate) second_moment: Vec<f32>,
}

/// Ordered collection of named tensors owned by one network.
///
/// `scope` disambiguates gradients when several networks are recorded on the
/// same graph (e.g. noiser, discriminator and classifier in one noiser step).
#[derive(Clone, Debug)]
pub struct ParameterSet {
    scope: String,
    entries: Vec<ParamEntry>,
    step: u64,
}

impl ParameterSet {
    pub fn new(scope: impl Into<String>) -> Self {
        Self {
            scope: scope.into(),
            entries: Vec::new(),
            step: 0,
        }
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.position(&name).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter '{name}' in '{}'",
                self.scope
            )));
        }
        let n = value.numel();
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        });
        Ok(())
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.position(name)
            .map(|i| &self.entries[i].value)
            .ok_or_else(|| Error::State(format!("no parameter '{name}' in '{}'", self.scope)))
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.position(name)
            .map(|i| &self.entries[i])
            .ok_or_else(|| Error::State(format!("no parameter '{name}' in '{}'", self.scope)))
    }

    /// Replaces the values of an existing entry, keeping optimizer moments.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::State(format!("no parameter '{name}' in '{}'", self.scope)))?;
        if self.entries[i].value.shape() != value.shape() {
            return Err(Error::shape(
                "parameter set",
                format!(
                    "'{name}' has shape {:?}, got {:?}",
                    self.entries[i].value.shape(),
                    value.shape()
                ),
            ));
        }
        self.entries[i].value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values, in entry order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update([0u8]);
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Drops optimizer moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for e in &mut self.entries {
            e.first_moment.iter_mut().for_each(|m| *m = 0.0);
            e.second_moment.iter_mut().for_each(|m| *m = 0.0);
        }
    }
}
