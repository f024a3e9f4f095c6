use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, NodeId, Var};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Same names, new tensors (shapes must match).
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<ParamStore> {
        if values.len() != self.values.len()
            || values.iter().zip(&self.values).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::invalid("replacement tensors must match the store"));
        }
        Ok(ParamStore {
            names: self.names.clone(),
            values,
            index: self.index.clone(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replaces every tensor from another store with identical names and
    /// shapes (e.g. one loaded from a checkpoint).
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::format(
                "parameters",
                format!("expected {} tensors, found {}", self.len(), other.len()),
            ));
        }
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::format("parameters", format!("missing tensor {name}")))?;
            if src.shape() != self.values[i].shape() {
                return Err(Error::format(
                    "parameters",
                    format!("{name}: shape {:?} vs {:?}", src.shape(), self.values[i].shape()),
                ));
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }
}

/// Registers freshly initialised parameters under a dotted name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.insert(full, value)
    }

    /// Glorot-uniform with an extra gain.
    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, gain: f64) -> Result<ParamId> {
        let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.tensor(name, Tensor::new(shape, data)?)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * standard_normal(self.rng)).collect();
        self.tensor(name, Tensor::new(shape, data)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::full(shape, 1.0))
    }
}

/// Box–Muller standard normal draw.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

struct DropoutState {
    rate: f64,
    rng: ChaCha8Rng,
}

/// One forward pass: a graph plus lazily registered parameter leaves.
///
/// Each parameter becomes a leaf the first time it is read, so a session
/// only pays for the parameters it touches.
pub struct Session<'p> {
    graph: Graph,
    params: &'p ParamStore,
    leaves: RefCell<Vec<Option<NodeId>>>,
    track_grads: bool,
    dropout: Option<RefCell<DropoutState>>,
}

impl<'p> Session<'p> {
    /// Inference: no gradients, no dropout.
    pub fn eval(params: &'p ParamStore, precision: Precision) -> Self {
        Self {
            graph: Graph::new(precision),
            params,
            leaves: RefCell::new(vec![None; params.len()]),
            track_grads: false,
            dropout: None,
        }
    }

    /// Gradients tracked, dropout disabled (verification runs).
    pub fn tracking(params: &'p ParamStore, precision: Precision) -> Self {
        Self {
            track_grads: true,
            ..Self::eval(params, precision)
        }
    }

    /// Training: gradients tracked and inverted dropout drawn from a stream
    /// seeded with `seed`. A zero rate is the identity.
    pub fn train(params: &'p ParamStore, precision: Precision, dropout_rate: f64, seed: u64) -> Self {
        Self {
            track_grads: true,
            dropout: (dropout_rate > 0.0).then(|| {
                RefCell::new(DropoutState {
                    rate: dropout_rate,
                    rng: ChaCha8Rng::seed_from_u64(seed),
                })
            }),
            ..Self::eval(params, precision)
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn param(&self, id: ParamId) -> Var<'_> {
        let mut leaves = self.leaves.borrow_mut();
        match leaves[id.0] {
            Some(node) => self.graph.var(node),
            None => {
                let v = self.graph.leaf(self.params.get(id).clone(), self.track_grads);
                leaves[id.0] = Some(v.id());
                v
            }
        }
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.graph.constant(t)
    }

    /// Inverted dropout; the identity outside training.
    pub fn dropout<'s>(&'s self, x: Var<'s>) -> Result<Var<'s>> {
        let Some(state) = &self.dropout else {
            return Ok(x);
        };
        let mut state = state.borrow_mut();
        let keep = 1.0 - state.rate;
        let shape = x.shape();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if state.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        x.mul_const(&Tensor::new(&shape, mask)?)
    }

    /// Parameter gradients after `backward`, indexed by [`ParamId`]. `None`
    /// for parameters this session never read.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.leaves
            .borrow()
            .iter()
            .map(|leaf| leaf.and_then(|node| grads.get(self.graph.var(node))))
            .collect()
    }
}
