//! Named parameter storage, forward-pass sessions, initialization and Adam.

use std::cell::RefCell;
use std::collections::BTreeMap;

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{BatchStats, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Learnable parameters plus non-learnable buffers (running statistics).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Copies every entry of `other` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, v) in &other.params {
            self.params.insert(format!("{prefix}{k}"), v.clone());
        }
        for (k, v) in &other.buffers {
            self.buffers.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix removed.
    pub fn extract_prefixed(&self, prefix: &str) -> ParamSet {
        let strip = |m: &BTreeMap<String, Tensor>| {
            m.iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect()
        };
        ParamSet {
            params: strip(&self.params),
            buffers: strip(&self.buffers),
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (kind, map) in [("p", &self.params), ("b", &self.buffers)] {
            for (name, t) in map {
                hasher.update(kind.as_bytes());
                hasher.update(name.as_bytes());
                for d in t.shape() {
                    hasher.update((*d as u64).to_le_bytes());
                }
                for v in t.iter() {
                    hasher.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) {
        for (name, s) in stats {
            let mean_key = format!("{name}.running_mean");
            let var_key = format!("{name}.running_var");
            if let Some(rm) = self.buffers.get_mut(&mean_key) {
                let batch = s.mean.clone().into_dyn();
                *rm = &*rm * (1.0 - BN_MOMENTUM) + &(batch * BN_MOMENTUM);
            }
            if let Some(rv) = self.buffers.get_mut(&var_key) {
                let batch = s.var_unbiased.clone().into_dyn();
                *rv = &*rv * (1.0 - BN_MOMENTUM) + &(batch * BN_MOMENTUM);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass over a [`ParamSet`].
///
/// With a tape, parameters are registered as leaves the first time they are
/// read; without one they are constants and nothing is recorded.
pub struct Session<'a> {
    params: &'a ParamSet,
    tape: Option<Tape>,
    mode: Mode,
    leaves: RefCell<BTreeMap<String, Var>>,
    stats: RefCell<Vec<(String, BatchStats)>>,
    trace: RefCell<Option<Vec<(String, Vec<usize>)>>>,
}

impl<'a> Session<'a> {
    pub fn inference(params: &'a ParamSet) -> Self {
        Self::new(params, None, Mode::Eval)
    }

    pub fn new(params: &'a ParamSet, tape: Option<Tape>, mode: Mode) -> Self {
        Self {
            params,
            tape,
            mode,
            leaves: RefCell::new(BTreeMap::new()),
            stats: RefCell::new(Vec::new()),
            trace: RefCell::new(None),
        }
    }

    /// Starts recording intermediate shapes passed to [`Session::record`].
    pub fn enable_trace(&self) {
        *self.trace.borrow_mut() = Some(Vec::new());
    }

    /// Notes the shape of `x` (batch axis dropped) under `label` when tracing.
    pub fn record(&self, label: &str, x: &Var) {
        if let Some(t) = self.trace.borrow_mut().as_mut() {
            t.push((label.to_string(), x.shape()[1..].to_vec()));
        }
    }

    /// Notes an explicit shape under `label` when tracing.
    pub fn record_shape(&self, label: &str, shape: &[usize]) {
        if let Some(t) = self.trace.borrow_mut().as_mut() {
            t.push((label.to_string(), shape.to_vec()));
        }
    }

    pub fn take_trace(&self) -> Vec<(String, Vec<usize>)> {
        self.trace.borrow_mut().take().unwrap_or_default()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    /// Parameter `name` as a var. Panics on unknown names: a missing parameter
    /// is a construction bug, not a runtime condition.
    pub fn param(&self, name: &str) -> Var {
        if let Some(v) = self.leaves.borrow().get(name) {
            return v.clone();
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let var = match &self.tape {
            Some(tape) => tape.leaf(value),
            None => Var::constant(value),
        };
        self.leaves.borrow_mut().insert(name.to_string(), var.clone());
        var
    }

    /// Batch normalization over channel `axis` with parameters under `name`.
    pub fn batch_norm(&self, x: &Var, name: &str, axis: usize) -> Var {
        let gamma = self.param(&format!("{name}.weight"));
        let beta = self.param(&format!("{name}.bias"));
        match self.mode {
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(&gamma, &beta, axis, BN_EPS);
                self.stats.borrow_mut().push((name.to_string(), stats));
                y
            }
            Mode::Eval => {
                let buffer = |suffix: &str| {
                    self.params
                        .buffer(&format!("{name}.{suffix}"))
                        .unwrap_or_else(|| panic!("missing buffer {name}.{suffix}"))
                };
                x.batch_norm_eval(&gamma, &beta, buffer("running_mean"), buffer("running_var"), axis, BN_EPS)
            }
        }
    }

    /// `x [.., in] -> [.., out]` with weight `[in, out]` and bias `[out]`.
    pub fn linear(&self, x: &Var, name: &str) -> Var {
        let w = self.param(&format!("{name}.weight"));
        let b = self.param(&format!("{name}.bias"));
        let shape = x.shape().to_vec();
        let (inner, lead) = (shape[shape.len() - 1], shape[..shape.len() - 1].to_vec());
        let rows: usize = lead.iter().product();
        let y = x.reshape(&[rows, inner]).matmul(&w).add(&b.unsqueeze(0));
        let mut out_shape = lead;
        out_shape.push(w.shape()[1]);
        y.reshape(&out_shape)
    }

    /// Batch statistics gathered so far (train mode only).
    pub fn take_stats(&self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.stats.borrow_mut())
    }

    /// Gradients of `loss` for every parameter read during this session.
    pub fn gradients(&self, loss: &Var) -> BTreeMap<String, Tensor> {
        let Some(tape) = &self.tape else {
            return BTreeMap::new();
        };
        let grads = tape.backward(loss);
        self.leaves
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(v)))
            .collect()
    }
}

/// Seeded parameter initializer.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub params: &'a mut ParamSet,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng, params: &'a mut ParamSet) -> Self {
        Self { rng, params }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) {
        let t = Tensor::from_shape_fn(IxDyn(shape), |_| self.rng.gen_range(-bound..=bound));
        self.params.insert(name, t);
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.params.insert(name, Tensor::zeros(IxDyn(shape)));
    }

    pub fn constant(&mut self, name: &str, value: Tensor) {
        self.params.insert(name, value);
    }

    /// Convolution weight `[out, in, ...kernel]` and bias `[out]`, both
    /// uniform in `±1/sqrt(fan_in)`.
    pub fn conv(&mut self, name: &str, shape: &[usize], bias: bool) {
        let fan_in: usize = shape[1..].iter().product();
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.uniform(&format!("{name}.weight"), shape, bound);
        if bias {
            self.uniform(&format!("{name}.bias"), &[shape[0]], bound);
        }
    }

    /// Dense layer stored as `[in, out]`.
    pub fn linear(&mut self, name: &str, inputs: usize, outputs: usize) {
        let bound = 1.0 / (inputs as f64).sqrt();
        self.uniform(&format!("{name}.weight"), &[inputs, outputs], bound);
        self.uniform(&format!("{name}.bias"), &[outputs], bound);
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) {
        self.params.insert(format!("{name}.weight"), Tensor::ones(IxDyn(&[channels])));
        self.params.insert(format!("{name}.bias"), Tensor::zeros(IxDyn(&[channels])));
        self.params
            .insert_buffer(format!("{name}.running_mean"), Tensor::zeros(IxDyn(&[channels])));
        self.params
            .insert_buffer(format!("{name}.running_var"), Tensor::ones(IxDyn(&[channels])));
    }
}

/// Adam with L2-style weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update for every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let g = if self.weight_decay != 0.0 {
                grad + &(&*p * self.weight_decay)
            } else {
                grad.clone()
            };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            m.zip_mut_with(&g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            v.zip_mut_with(&g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let (lr, eps) = (self.learning_rate, self.eps);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| *p -= lr * (m / bias1) / ((v / bias2).sqrt() + eps));
        }
    }
}
