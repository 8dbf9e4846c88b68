use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One serialized parameter record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat, ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalars.
    pub fn size(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Hard copy of every value from a store with the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<(), TensorError> {
        self.check_layout(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    fn check_layout(&self, other: &ParamStore) -> Result<(), TensorError> {
        let same = self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(TensorError::Invalid("parameter layouts differ".into()));
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect()
    }

    /// Overwrite values from records; names and shapes must match exactly.
    pub fn load_records(&mut self, records: &[NamedTensor]) -> Result<(), TensorError> {
        if records.len() != self.tensors.len() {
            return Err(TensorError::Invalid(format!(
                "expected {} parameter records, found {}",
                self.tensors.len(),
                records.len()
            )));
        }
        for ((name, t), rec) in self.names.iter().zip(&mut self.tensors).zip(records) {
            if *name != rec.name || t.shape() != rec.shape.as_slice() {
                return Err(TensorError::Invalid(format!(
                    "parameter record {} {:?} does not match {} {:?}",
                    rec.name,
                    rec.shape,
                    name,
                    t.shape()
                )));
            }
            if rec.data.len() != t.numel() {
                return Err(TensorError::DataLength {
                    shape: rec.shape.clone(),
                    len: rec.data.len(),
                });
            }
            t.data_mut().copy_from_slice(&rec.data);
        }
        Ok(())
    }
}

/// A tape bound to a parameter store. Parameters are loaded onto the tape
/// lazily, at most once each.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    track: bool,
}

impl<'a> Session<'a> {
    /// `track` decides whether parameters participate in backward.
    pub fn new(store: &'a ParamStore, track: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            vars: vec![None; store.len()],
            track,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = if self.track {
            self.g.leaf(t)
        } else {
            self.g
                .constant(t.shape().to_vec(), t.data().to_vec())
                .expect("stored tensor is well-formed")
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradient of every parameter, zeros where it did not reach.
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        self.store
            .tensors()
            .iter()
            .zip(&self.vars)
            .map(|(t, v)| {
                v.and_then(|v| self.g.grad(v))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    }
}
