//! Named parameter storage and the JSON checkpoint format.
//!
//! Checkpoint layout (version 1):
//!
//! ```json
//! {
//!   "format": "keymotion-params",
//!   "version": 1,
//!   "params": [
//!     { "name": "dpse.adapter.w", "shape": [512, 512], "values": [ ... ] }
//!   ]
//! }
//! ```
//!
//! `values` are row-major. Entries appear in registration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const CHECKPOINT_FORMAT: &str = "keymotion-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    grads: Vec<Matrix>,
}

impl ParamStore {
    pub const fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Panics if `name` is already registered.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "parameter `{name}` registered twice"
        );
        let (r, c) = value.shape();
        self.names.push(name);
        self.values.push(value);
        self.grads.push(Matrix::zeros(r, c));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Adds per-parameter gradients (e.g. from [`Gradients::into_param_grads`](super::Gradients::into_param_grads)).
    pub fn accumulate(&mut self, grads: &[Option<Matrix>], scale: f64) {
        for (acc, g) in self.grads.iter_mut().zip(grads) {
            if let Some(g) = g {
                for (a, v) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a += scale * v;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub params: Vec<ParamEntry>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: Vec::new(),
        }
    }
}

impl Checkpoint {
    /// Appends every parameter of `store`, names prefixed with `prefix.`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for id in store.ids() {
            let v = store.value(id);
            self.params.push(ParamEntry {
                name: format!("{prefix}.{}", store.name(id)),
                shape: [v.rows(), v.cols()],
                values: v.as_slice().to_vec(),
            });
        }
    }

    pub fn from_store(prefix: &str, store: &ParamStore) -> Self {
        let mut c = Checkpoint::default();
        c.push_store(prefix, store);
        c
    }

    /// Overwrites every parameter of `store` from entries named `prefix.<name>`.
    /// Missing entries and shape mismatches are errors.
    pub fn load_into(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let full = format!("{prefix}.{}", store.name(id));
            let entry = self
                .params
                .iter()
                .find(|e| e.name == full)
                .ok_or_else(|| Error::Format(format!("checkpoint has no parameter `{full}`")))?;
            let target = store.value(id);
            if entry.shape != [target.rows(), target.cols()]
                || entry.values.len() != target.len()
            {
                return Err(Error::dim(format!(
                    "parameter `{full}` is {:?} in the checkpoint but {}x{} in the model",
                    entry.shape,
                    target.rows(),
                    target.cols()
                )));
            }
            *store.value_mut(id) = Matrix::from_vec(
                entry.shape[0],
                entry.shape[1],
                entry.values.clone(),
            );
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint `{}` version {}",
                c.format, c.version
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::motion_io::write_text(path.as_ref(), &self.to_json())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
