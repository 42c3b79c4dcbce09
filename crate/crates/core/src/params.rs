//! Named parameter storage, graph binding and the Adam optimizer.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::weights::WeightTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter-count bucket, following the usual four-way split of a
/// transfer-learning model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Backbone,
    /// Adapters, the flow-adapter norms, the frozen-branch probe and the
    /// fusion matrix.
    AdapterLinear,
    Aligning,
    Temporal,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Backbone,
        Component::AdapterLinear,
        Component::Aligning,
        Component::Temporal,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Component::Backbone => "backbone",
            Component::AdapterLinear => "adapters+flow+linear",
            Component::Aligning => "aligning encoder",
            Component::Temporal => "temporal processing",
        }
    }
}

#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub trainable: bool,
    pub component: Component,
}

impl fmt::Debug for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:?} trainable={}", self.name, self.value.shape(), self.trainable)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool, component: Component) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value: Arc::new(value),
            trainable,
            component,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        self.params[id.0].value.clone()
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                name: p.name.clone(),
                expected: p.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn set_component_trainable(&mut self, component: Component, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.component == component) {
            p.trainable = trainable;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// (trainable, frozen) scalar counts.
    pub fn counts(&self) -> (usize, usize) {
        self.params.iter().fold((0, 0), |(t, f), p| {
            if p.trainable {
                (t + p.value.len(), f)
            } else {
                (t, f + p.value.len())
            }
        })
    }

    pub fn component_count(&self, component: Component) -> usize {
        self.params
            .iter()
            .filter(|p| p.component == component)
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over names and bit patterns of every frozen tensor.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| !p.trainable) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_table(&self) -> WeightTable {
        let mut t = WeightTable::new();
        for p in &self.params {
            t.insert(p.name.clone(), (*p.value).clone());
        }
        t
    }

    /// Copies matching tensors out of `table`. Missing names are reported
    /// together as an error; tensors the store does not know are ignored
    /// with a warning.
    pub fn load_table(&mut self, table: &WeightTable, only: Option<Component>) -> Result<()> {
        let mut missing = Vec::new();
        for p in self.params.iter_mut() {
            if only.is_some_and(|c| c != p.component) {
                continue;
            }
            match table.get(&p.name) {
                Ok(t) => {
                    if t.shape() != p.value.shape() {
                        return Err(Error::ShapeMismatch {
                            name: p.name.clone(),
                            expected: p.value.shape().to_vec(),
                            found: t.shape().to_vec(),
                        });
                    }
                    p.value = Arc::new(t.clone());
                }
                Err(_) => missing.push(p.name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::UnknownTensor(format!("missing from weight file: {}", missing.join(", "))));
        }
        for (name, _) in table.iter() {
            if !self.index.contains_key(name) {
                log::warn!("ignoring unused tensor `{name}` in weight file");
            }
        }
        Ok(())
    }
}

/// Binds parameters of a store into one graph, creating each leaf on first
/// use. Frozen parameters become constants.
pub struct Session<'g, 's> {
    pub graph: &'g Graph,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Var<'g>>>>,
}

impl<'g, 's> Session<'g, 's> {
    pub fn new(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self {
            graph,
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    /// A session in which the listed parameters are the given variables;
    /// the rest bind lazily as usual. Lets external code (gradient checks)
    /// own the leaves.
    pub fn with_bindings(graph: &'g Graph, store: &'s ParamStore, bindings: &[(ParamId, Var<'g>)]) -> Result<Self> {
        let mut bound = vec![None; store.len()];
        for (id, v) in bindings {
            let p = &store.params[id.0];
            if p.value.shape() != v.shape().as_slice() {
                return Err(Error::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: v.shape(),
                });
            }
            bound[id.0] = Some(*v);
        }
        Ok(Self {
            graph,
            store,
            bound: RefCell::new(bound),
        })
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var<'g> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            let p = &self.store.params[id.0];
            self.graph.leaf_shared(p.value.clone(), p.trainable)
        })
    }

    pub fn constant(&self, t: Tensor) -> Var<'g> {
        self.graph.constant(t)
    }

    /// Gradients of trainable parameters, indexed by [`ParamId`].
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .map(|(i, v)| match v {
                Some(v) if self.store.params[i].trainable => grads.take_id(v.id()),
                _ => None,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    /// Applies one update. Parameters that are frozen or have no gradient
    /// are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !store.params[i].trainable {
                continue;
            }
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let p = store.value_mut(ParamId(i));
            for (((p, m), v), g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}


/// Uniform `±1/sqrt(fan_in)` initialization, rounded to `f32` so a freshly
/// initialized model survives the weight file bit-for-bit.
pub(crate) fn init_uniform<R: rand::Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    init_bounded(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

pub(crate) fn init_bounded<R: rand::Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, bound, rng).map(|v| v as f32 as f64)
}
