//! Named parameter storage in declaration order.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter block is initialized.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Uniform(f64),
    Normal(f64),
    Constant(f64),
}

/// Parameter tensors keyed by name, kept in the order they were declared.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        assert!(!self.index.contains_key(name), "parameter `{name}` declared twice");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Uniform(r) => {
                let u = Uniform::new_inclusive(-r, r).expect("valid range");
                (0..n).map(|_| u.sample(rng)).collect()
            }
            Init::Normal(s) => {
                let d = Normal::new(0.0, s).expect("valid sigma");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::Constant(c) => vec![c; n],
        };
        let mut t = Tensor::new(shape, data).expect("declared shape");
        // Parameters live in single precision so checkpoints are exact.
        t.round_to_f32();
        self.insert(name, t)
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> ParamId {
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.index.insert(name.to_string(), id);
        id
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
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor with the one stored under the same name in
    /// `other`, requiring identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Invalid(format!(
                "parameter layouts differ: expected {} blocks, found {}",
                self.names.len(),
                other.names.len()
            )));
        }
        for (i, t) in other.tensors.iter().enumerate() {
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::ShapeMismatch {
                    primitive: "load_params",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    /// Copies every block whose name also exists in `other` with the same
    /// shape; returns how many were copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(j) = other.id(name) {
                if other.get(j).shape() == self.tensors[i].shape() {
                    self.tensors[i] = other.get(j).clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}
