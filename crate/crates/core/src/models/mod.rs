//! Cell-type CNN, multi-head attribute ViT and their checkpoint format.

mod checkpoint;
mod cnn;
mod vit;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint,
    Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC,
};
pub use cnn::{Cnn, CnnConfig, CnnOutput};
pub use vit::{Vit, VitConfig, VitOutput};

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Element, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Named parameters in declaration order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params<T = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Element> Params<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter on `tape`. Trainable parameters track
    /// gradients; otherwise they are constants.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect::<Vec<_>>();
        let index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Bound { vars, index }
    }

    pub fn cast<U: Element>(&self) -> Params<U> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }
}

/// Parameters recorded on one tape.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Panics on unknown names: parameter names are fixed by the architecture.
    pub fn get(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter {name}"))]
    }

    /// Vars in parameter declaration order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Rebinds parameter `name` to `var`, e.g. to differentiate with respect
    /// to a single parameter tensor.
    pub fn with(mut self, name: &str, var: Var) -> Self {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        self.vars[i] = var;
        self
    }
}

pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<T: Element>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape.to_vec(), |_| T::of(dist.sample(&mut self.rng)))
    }

    /// He initialization: `N(0, 2 / fan_in)`.
    pub fn he<T: Element>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }
}

/// Either architecture, as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Cnn(Cnn),
    Vit(Vit),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Cnn(CnnConfig),
    Vit(VitConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelConfig::Cnn(_) => "cnn",
            ModelConfig::Vit(_) => "vit",
        }
    }
}

impl Model {
    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Cnn(m) => ModelConfig::Cnn(m.config.clone()),
            Model::Vit(m) => ModelConfig::Vit(m.config.clone()),
        }
    }

    pub fn params(&self) -> &Params {
        match self {
            Model::Cnn(m) => &m.params,
            Model::Vit(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut Params {
        match self {
            Model::Cnn(m) => &mut m.params,
            Model::Vit(m) => &mut m.params,
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            Model::Cnn(m) => m.config.input_size,
            Model::Vit(m) => m.config.input_size,
        }
    }
}

pub(crate) fn check_input(
    op: &'static str,
    shape: &[usize],
    size: usize,
) -> Result<usize, ModelError> {
    if shape.len() != 4 || shape[1] != 3 || shape[2] != size || shape[3] != size {
        return Err(ModelError::Tensor(TensorError::Shape {
            op,
            detail: format!("expected [N, 3, {size}, {size}], got {shape:?}"),
        }));
    }
    Ok(shape[0])
}
