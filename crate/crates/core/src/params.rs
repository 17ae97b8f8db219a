//! Named parameter tensors and the handles layers use to find them.
//!
//! Layers are built against a [`ParamRegistry`], which hands out [`ParamId`]s
//! and records each tensor's name, shape and initializer. A [`ParamSet`] holds
//! the actual values in registration order; binding it to a tape yields
//! [`ParamVars`], indexed by the same ids.

use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U[-sqrt(1/fan_in), sqrt(1/fan_in)]`
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    specs: Vec<ParamSpec>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape,
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Draws initial values in registration order.
    pub fn initialize<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let tensors = self
            .specs
            .iter()
            .map(|s| match s.init {
                Init::FanIn(fan_in) => Tensor::uniform(s.shape.clone(), (1.0 / fan_in as f64).sqrt(), rng),
                Init::Zeros => Tensor::zeros(s.shape.clone()),
                Init::Ones => Tensor::full(s.shape.clone(), T::one()),
            })
            .collect();
        ParamSet {
            names: self.specs.iter().map(|s| s.name.clone()).collect(),
            tensors,
        }
    }

    /// Checks that `set` has exactly the registered names and shapes.
    pub fn validate<T: Scalar>(&self, set: &ParamSet<T>) -> Result<()> {
        for (i, spec) in self.specs.iter().enumerate() {
            let Some(name) = set.names.get(i) else {
                return Err(Error::ConfigMismatch(format!("missing tensor {}", spec.name)));
            };
            if *name != spec.name {
                return Err(Error::ConfigMismatch(format!(
                    "tensor #{i}: expected {}, found {name}",
                    spec.name
                )));
            }
            let found = set.tensors[i].shape();
            if found != spec.shape.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "{}: expected shape {:?}, found {:?}",
                    spec.name, spec.shape, found
                )));
            }
        }
        if set.names.len() > self.specs.len() {
            return Err(Error::ConfigMismatch(format!(
                "unexpected tensor {}",
                set.names[self.specs.len()]
            )));
        }
        Ok(())
    }
}

/// Parameter values in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Contract(format!(
                "{} names for {} tensors",
                names.len(),
                tensors.len()
            )));
        }
        Ok(ParamSet { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every tensor as a leaf; `trainable` controls whether the
    /// leaves receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        ParamVars(
            self.tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        )
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for ParamVars {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
