//! Named parameter storage, deterministic initialisation and tape binding.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{channel_linear, Gradients, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
///
/// Random initialisation draws from a generator seeded by `(seed, name)`, so
/// a parameter's initial value depends only on its name and the seed, not on
/// how many parameters were created before it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    seed: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name))
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = self.tensors.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_grad());
        ParamId(id)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: Real) -> ParamId {
        let mut rng = self.rng_for(name);
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| dist.sample(&mut rng));
        self.add(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: Real) -> ParamId {
        let mut rng = self.rng_for(name);
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let t = Tensor::from_fn(shape, |_| dist.sample(&mut rng));
        self.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: Real) -> ParamId {
        self.add(name, Tensor::full(shape, value))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, true, None)
    }

    /// Records every parameter as an untracked constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, false, None)
    }

    pub fn bind_with<'t>(&self, tape: &'t Tape, track: bool, recorder: Option<&'t Recorder>) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if track { tape.leaf(t) } else { tape.constant(t.clone()) })
            .collect();
        Bound { tape, vars, recorder }
    }

    /// Stores the gradients of a backward sweep into each parameter.
    pub fn accumulate_grads(&mut self, grads: &Gradients, bound: &Bound<'_>) -> Result<()> {
        for (t, v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(*v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in other.iter() {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter {name}")))?;
            let dst = &mut self.tensors[id.0];
            if dst.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "parameter count {} vs {}",
                other.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

/// Intermediate tensors captured during a forward pass for analysis.
#[derive(Default)]
pub struct Recorder {
    taps: RefCell<Vec<(String, Tensor)>>,
    traces: RefCell<Vec<crate::ssm::SsmTrace>>,
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tap(&self, name: String, t: &Tensor) {
        self.taps.borrow_mut().push((name, t.detach()));
    }

    pub fn trace(&self, t: crate::ssm::SsmTrace) {
        self.traces.borrow_mut().push(t);
    }

    pub fn take_taps(&self) -> Vec<(String, Tensor)> {
        std::mem::take(&mut self.taps.borrow_mut())
    }

    pub fn take_traces(&self) -> Vec<crate::ssm::SsmTrace> {
        std::mem::take(&mut self.traces.borrow_mut())
    }
}

/// Parameters bound to a tape for one forward pass.
pub struct Bound<'t> {
    pub tape: &'t Tape,
    vars: Vec<Var<'t>>,
    recorder: Option<&'t Recorder>,
}

impl<'t> Bound<'t> {
    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Substitutes the variable bound to one parameter.
    pub fn override_var(&mut self, id: ParamId, v: Var<'t>) {
        self.vars[id.0] = v;
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn recorder(&self) -> Option<&'t Recorder> {
        self.recorder
    }

    pub fn tap(&self, name: impl FnOnce() -> String, v: Var<'t>) {
        if let Some(r) = self.recorder {
            r.tap(name(), &v.value());
        }
    }
}

/// Per-position linear map over the channel axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Uniform `±1/√in` initialisation; zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, bias: bool) -> Self {
        let bound = 1.0 / (in_features as Real).sqrt();
        let weight = store.uniform(&format!("{name}.w"), &[out_features, in_features], bound);
        let bias = bias.then(|| store.constant(&format!("{name}.b"), &[out_features], 0.0));
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.weight).chain(self.bias)
    }

    pub fn forward<'t>(&self, ctx: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        channel_linear(x, ctx.p(self.weight), self.bias.map(|b| ctx.p(b)))
    }
}
