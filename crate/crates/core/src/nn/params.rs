use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named tensors packed into one flat buffer so optimizers and checkpoints
/// can treat them as a single vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        mut init: impl FnMut() -> f64,
    ) -> ParamId {
        let spec = ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.data.len(),
        };
        self.data.extend((0..spec.len()).map(|_| init()));
        self.specs.push(spec);
        ParamId(self.specs.len() - 1)
    }

    pub fn range(&self, id: ParamId) -> Range<usize> {
        let s = &self.specs[id.0];
        s.offset..s.offset + s.len()
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[self.range(id)]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let r = self.range(id);
        &mut self.data[r]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Replaces the values, keeping the layout. Used by checkpoint loading.
    pub(crate) fn load(&mut self, specs: &[ParamSpec], data: Vec<f64>) -> Result<()> {
        if specs != self.specs.as_slice() || data.len() != self.data.len() {
            return Err(Error::invalid("parameter layout does not match the model"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite parameter value"));
        }
        self.data = data;
        Ok(())
    }
}
