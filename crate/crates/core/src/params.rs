//! Parameter storage and the per-pass forward context.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics if `name` is already taken.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.tensors[id.0].shape(), value.shape(), "shape change for `{}`", self.names[id.0]);
        self.tensors[id.0] = value;
    }

    pub fn fill(&mut self, id: ParamId, value: f64) {
        self.tensors[id.0].values_mut().fill(value);
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }
}

/// Registers freshly initialized parameters under a name prefix.
///
/// Every parameter draws from its own stream keyed by its full name.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Init {
            store,
            seed,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            seed: self.seed,
            prefix,
        }
    }

    fn qualified(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        rng::stream(self.seed, &format!("init.{}", self.qualified(name)))
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = self.qualified(name);
        self.store.insert(full, value)
    }

    /// Xavier-uniform `rows×cols`.
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform(name, vec![rows, cols], bound)
    }

    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> ParamId {
        let mut rng = self.rng(name);
        let t = Tensor::uniform(shape, bound, &mut rng);
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn full(&mut self, name: &str, shape: Vec<usize>, value: f64) -> ParamId {
        self.tensor(name, Tensor::full(shape, value))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Whether non-differentiable block selections are computed fresh, recorded
/// for later replay, or replayed. Replay freezes selections across repeated
/// forward passes (finite-difference checks).
#[derive(Debug, Clone, Default)]
pub enum Selections {
    #[default]
    Compute,
    Record(Vec<Vec<Vec<usize>>>),
    Replay(Vec<Vec<Vec<usize>>>, usize),
}

/// Everything a forward pass needs: the tape, the parameters bound as
/// leaves on it, train/eval mode and the dropout stream.
pub struct Ctx<'t> {
    pub tape: &'t mut Tape,
    params: Vec<Var>,
    mode: Mode,
    dropout_rng: ChaCha8Rng,
    pub selections: Selections,
}

impl<'t> Ctx<'t> {
    /// Binds every parameter of `store` as a gradient-tracking leaf.
    pub fn new(tape: &'t mut Tape, store: &ParamStore, mode: Mode, dropout_seed: u64) -> Self {
        let params = store.tensors().iter().map(|t| tape.param(t.clone())).collect();
        Self::from_vars(tape, params, mode, dropout_seed)
    }

    /// Uses already-registered leaves, indexed like the store they came from.
    pub fn from_vars(tape: &'t mut Tape, params: Vec<Var>, mode: Mode, dropout_seed: u64) -> Self {
        Ctx {
            tape,
            params,
            mode,
            dropout_rng: rng::stream(dropout_seed, "dropout"),
            selections: Selections::Compute,
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let seed = self.dropout_rng.gen();
        self.tape.dropout(x, rate, seed)
    }

    /// Routes a block selection through the current [`Selections`] policy.
    pub fn select(&mut self, compute: impl FnOnce() -> Vec<Vec<usize>>) -> Vec<Vec<usize>> {
        match &mut self.selections {
            Selections::Compute => compute(),
            Selections::Record(log) => {
                let s = compute();
                log.push(s.clone());
                s
            }
            Selections::Replay(log, cursor) => {
                let s = log[*cursor].clone();
                *cursor += 1;
                s
            }
        }
    }
}
