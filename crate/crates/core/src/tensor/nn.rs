//! Named parameters and the small layer building blocks shared by every
//! stage of the model.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum ParamInit {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Ordered collection of named `f32` parameter tensors.
#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: ParamInit) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let numel: usize = shape.iter().product();
        let data = match init {
            ParamInit::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                (0..numel)
                    .map(|_| self.rng.gen_range(-bound..=bound))
                    .collect()
            }
            ParamInit::Zeros => vec![0.0; numel],
            ParamInit::Ones => vec![1.0; numel],
        };
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values
            .push(Tensor::new(shape.to_vec(), data).expect("param shape"));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: expected shape {:?}, found {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Registers every parameter on `tape` as a gradient-receiving leaf.
    /// The returned vector is indexed by [`ParamId::index`].
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.cast())).collect()
    }

    /// Like [`ParamStore::bind`] but records parameters as constants.
    pub fn bind_frozen<T: Scalar>(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.values.iter().map(|v| tape.constant(v.cast())).collect()
    }
}

/// Affine map `x · W + b` with `W: in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                &[input, output],
                ParamInit::Uniform { fan_in: input },
            ),
            bias: store.add(
                format!("{name}.bias"),
                &[output],
                ParamInit::Uniform { fan_in: input },
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[self.weight.0])?;
        tape.add_row(y, vars[self.bias.0])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), &[dim], ParamInit::Ones),
            bias: store.add(format!("{name}.bias"), &[dim], ParamInit::Zeros),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        tape.layer_norm(x, vars[self.gain.0], vars[self.bias.0], Self::EPS)
    }
}

/// Multi-head attention with input and output projections.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: channels {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, &format!("{name}.v"), dim, dim),
            out: Linear::new(store, &format!("{name}.out"), dim, dim),
            heads,
        })
    }

    /// `queries` attend to (`keys`, `values`); rows are split into `blocks`
    /// independent groups (see [`Tape::attention`]).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        queries: Var,
        keys: Var,
        values: Var,
        blocks: usize,
    ) -> Result<Var> {
        let q = self.q.forward(tape, vars, queries)?;
        let k = self.k.forward(tape, vars, keys)?;
        let v = self.v.forward(tape, vars, values)?;
        let o = tape.attention(q, k, v, self.heads, blocks)?;
        self.out.forward(tape, vars, o)
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, vars, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, vars, h)
    }
}
