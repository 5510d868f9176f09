//! Named parameter storage.
//!
//! Parameters live outside the tape as plain tensors and are bound as leaves
//! at the start of each forward pass. Each tensor is initialized from its own
//! random stream keyed by `(seed, name)`, so a parameter's initial value does
//! not depend on what else the model contains or on registration order.

use std::collections::HashMap;
use std::ops::Index;

use fiber_tensor::{Gradients, Rng, Tape, Tensor, Var};

/// Optimizer group; each group has its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    /// Uni-modal text and image backbones, including the dual-encoder pooling.
    Backbone,
    /// Inserted cross-modal blocks and gates.
    CrossModal,
    /// Task heads.
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: Group,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

/// 64-bit FNV-1a, used to key per-parameter random streams.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on duplicate names: names are checkpoint keys.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: Group) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, group });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(value.shape(), self.params[id.0].value.shape(), "shape change for {}", self.params[id.0].name);
        self.params[id.0].value = value;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.numel()).sum()
    }

    /// Binds every parameter as a tape leaf, or as constants when `tape` is `None`.
    pub fn bind(&self, tape: Option<&Tape>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| match tape {
                Some(t) => t.leaf(p.value.clone()),
                None => Var::constant(p.value.clone()),
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters bound for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Gradient per parameter (zeros for parameters the loss did not reach).
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| grads.get(v).cloned()).collect()
    }
}

/// Registers parameters under a dotted prefix with deterministic init.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    group: Group,
    seed: u64,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, group: Group) -> Self {
        Self {
            store,
            prefix: String::new(),
            group,
            seed,
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        Builder {
            prefix: self.full(name),
            store: self.store,
            group: self.group,
            seed: self.seed,
        }
    }

    pub fn group(&mut self, group: Group) -> Builder<'_> {
        Builder {
            prefix: self.prefix.clone(),
            store: self.store,
            group,
            seed: self.seed,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn rng_for(&self, name: &str) -> Rng {
        Rng::derive(self.seed, fnv1a(self.full(name).as_bytes()))
    }

    pub fn constant(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = self.full(name);
        self.store.add(full, value, self.group)
    }

    /// Uniform Xavier init for a `fan_out × fan_in` matrix.
    pub fn xavier(&mut self, name: &str, fan_out: usize, fan_in: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, vec![fan_out, fan_in], bound)
    }

    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> ParamId {
        let mut rng = self.rng_for(name);
        let value = Tensor::from_fn(shape, |_| rng.uniform_range(-bound, bound));
        self.constant(name, value)
    }

    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> ParamId {
        let mut rng = self.rng_for(name);
        let value = Tensor::from_fn(shape, |_| std * rng.normal());
        self.constant(name, value)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        self.constant(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        self.constant(name, Tensor::ones(shape))
    }
}
