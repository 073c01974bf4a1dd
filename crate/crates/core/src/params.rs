//! Named parameter blocks and their binding into a [`Graph`].

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Grads, Var};
use crate::tensor::Matrix;

/// Top-level parameter block, derived from the name prefix before the first `.`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    Content,
    AdapterV,
    Face,
    AdapterF,
    Speech,
    AdapterA,
    Blender,
    Estimator,
}

impl Block {
    pub const ALL: [Block; 8] = [
        Block::Content,
        Block::AdapterV,
        Block::Face,
        Block::AdapterF,
        Block::Speech,
        Block::AdapterA,
        Block::Blender,
        Block::Estimator,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Block::Content => "content",
            Block::AdapterV => "adapter_v",
            Block::Face => "face",
            Block::AdapterF => "adapter_f",
            Block::Speech => "speech",
            Block::AdapterA => "adapter_a",
            Block::Blender => "blender",
            Block::Estimator => "miest",
        }
    }

    pub fn of(name: &str) -> Option<Block> {
        let head = name.split('.').next()?;
        Block::ALL.into_iter().find(|b| b.prefix() == head)
    }

    /// The estimator block is theta; everything else is phi'.
    pub fn is_theta(self) -> bool {
        self == Block::Estimator
    }

    pub fn is_encoder(self) -> bool {
        matches!(self, Block::Content | Block::Face | Block::Speech)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names or names outside a known block.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        let name = name.into();
        assert!(Block::of(&name).is_some(), "parameter {name} has no known block prefix");
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn block(&self, id: usize) -> Block {
        Block::of(&self.names[id]).expect("validated on insert")
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn value(&self, id: usize) -> &Matrix {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Matrix {
        &mut self.values[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn ids_where(&self, pred: impl Fn(Block) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| pred(self.block(i))).collect()
    }

    /// A copy holding only the blocks accepted by `keep`.
    pub fn filtered(&self, keep: impl Fn(Block) -> bool) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, v) in self.iter() {
            if keep(Block::of(n).expect("validated")) {
                out.insert(n, v.clone());
            }
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Same names in the same order with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a.shape() == b.shape())
    }
}

/// Glorot-style uniform initialization for a `fan_in x fan_out` weight.
pub fn init_weight(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit))
}

pub fn init_normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradStore {
    grads: Vec<Option<Matrix>>,
}

impl GradStore {
    pub fn empty(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: usize) -> Option<&Matrix> {
        self.grads[id].as_ref()
    }

    pub fn accumulate(&mut self, id: usize, g: &Matrix) {
        match &mut self.grads[id] {
            Some(existing) => existing.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &GradStore) {
        for (id, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(id, g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_in_place(s);
        }
    }

    /// Euclidean norm over the listed parameters.
    pub fn norm(&self, ids: &[usize]) -> f64 {
        ids.iter().filter_map(|&i| self.grads[i].as_ref()).map(Matrix::sq_norm).sum::<f64>().sqrt()
    }

    /// True when some entry of parameter `id` has a nonzero gradient.
    pub fn is_nonzero(&self, id: usize) -> bool {
        self.grads[id].as_ref().is_some_and(|g| g.data().iter().any(|v| *v != 0.0))
    }
}

/// A [`Graph`] under construction plus lazily bound parameters.
pub struct Tape<'a> {
    pub g: Graph,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: Vec<bool>,
}

impl<'a> Tape<'a> {
    /// Parameters accepted by `trainable` become gradient-carrying leaves;
    /// the rest enter the graph as constants.
    pub fn new(params: &'a ParamStore, trainable: impl Fn(Block) -> bool) -> Self {
        let trainable = (0..params.len()).map(|i| trainable(params.block(i))).collect();
        Self { g: Graph::new(), params, bound: vec![None; params.len()], trainable }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    /// Binds a parameter by name. Panics on unknown names, which are
    /// programming errors in the model definition.
    pub fn p(&mut self, name: &str) -> Var {
        let id = self.params.id(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(v) = self.bound[id] {
            return v;
        }
        let v = self.g.leaf(self.params.value(id).clone(), self.trainable[id]);
        self.bound[id] = Some(v);
        v
    }

    /// Collects the gradients of every bound trainable parameter.
    pub fn param_grads(&self, grads: &Grads) -> GradStore {
        let mut out = GradStore::empty(self.params.len());
        for (id, v) in self.bound.iter().enumerate() {
            if let (Some(v), true) = (v, self.trainable[id]) {
                if let Some(g) = grads.get(*v) {
                    out.accumulate(id, g);
                }
            }
        }
        out
    }
}
