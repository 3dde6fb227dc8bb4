//! Parameters, layers and the AdamW optimizer.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; a forward pass binds the
//! store to a [`Tape`] through a [`Session`], which turns each parameter into a
//! leaf on first use. Gradients come back aligned with the store.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{FlagError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique within a store.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name `{name}`");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Replaces every tensor with the same-named entry of `other`.
    /// Fails on a missing name or a shape mismatch.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, t) in other {
            let id = self
                .index
                .get(name)
                .copied()
                .ok_or_else(|| FlagError::parse(name.clone(), "unknown parameter"))?;
            if self.values[id].shape() != t.shape() {
                return Err(FlagError::parse(
                    name.clone(),
                    format!("shape {:?} does not match model {:?}", t.shape(), self.values[id].shape()),
                ));
            }
            self.values[id] = t.clone();
            seen[id] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(FlagError::parse(self.names[i].clone(), "missing from checkpoint"));
        }
        Ok(())
    }
}

/// Binds a [`ParamStore`] to a [`Tape`] for one forward pass.
pub struct Session<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Session<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self { tape, store, bound: RefCell::new(vec![None; store.len()]) }
    }

    /// A session whose parameters are the given vars instead of store values.
    /// The store only supplies shapes; useful for differentiating with respect
    /// to externally owned leaves.
    pub fn with_vars(tape: &'t Tape, store: &'s ParamStore, vars: &[Var<'t>]) -> Self {
        assert_eq!(vars.len(), store.len(), "one var per parameter");
        Self { tape, store, bound: RefCell::new(vars.iter().copied().map(Some).collect()) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            let value = self.store.get(id).clone();
            if self.tape.is_recording() {
                self.tape.leaf(value)
            } else {
                self.tape.constant(value)
            }
        })
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Gradients for every parameter, zeros for those the loss did not touch.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        let bound = self.bound.borrow();
        (0..self.store.len())
            .map(|i| match bound[i] {
                Some(v) => grads.get_or_zeros(v),
                None => Tensor::zeros(self.store.values[i].shape()),
            })
            .collect()
    }
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..=bound)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Silu,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Self::Gelu => x.gelu(),
            Self::Silu => x.silu(),
        }
    }
}

/// Affine map over the last axis: `x @ W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_bias(store, rng, name, in_dim, out_dim, true)
    }

    pub fn with_bias(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[in_dim, out_dim], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[out_dim], bound)));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Var<'t> {
        let shape = x.shape();
        let y = if shape.len() < 2 {
            x.reshape(&[1, shape.iter().product()]).matmul(s.param(self.weight)).reshape(&[self.out_dim])
        } else {
            x.matmul(s.param(self.weight))
        };
        match self.bias {
            Some(b) => y + s.param(b),
            None => y,
        }
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Two linear layers with an activation in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dims: (usize, usize, usize),
        act: Activation,
    ) -> Self {
        Self {
            first: Linear::new(store, rng, &format!("{name}.0"), dims.0, dims.1),
            second: Linear::new(store, rng, &format!("{name}.1"), dims.1, dims.2),
            act,
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Var<'t> {
        self.second.forward(s, self.act.apply(self.first.forward(s, x)))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.first.params();
        p.extend(self.second.params());
        p
    }
}

/// Gated-GELU feed-forward: `W₂ · (GELU(W_gate h) ⊙ (W_val h))`.
#[derive(Clone, Debug)]
pub struct GegluFfn {
    pub gate: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl GegluFfn {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, inner: usize) -> Self {
        Self {
            gate: Linear::new(store, rng, &format!("{name}.gate"), dim, inner),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, inner),
            out: Linear::new(store, rng, &format!("{name}.out"), inner, dim),
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, h: Var<'t>) -> Var<'t> {
        let gated = self.gate.forward(s, h).gelu() * self.value.forward(s, h);
        self.out.forward(s, gated)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `(1 + γ) ⊙ LN(h) + β`, with `γ, β` of shape `[B, H]` broadcast over the
/// token axes of `h` (`[B, .., H]`).
pub fn adaln<'t>(h: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Var<'t> {
    let hs = h.shape();
    let gs = gamma.shape();
    let (b, width) = (gs[0], gs[gs.len() - 1]);
    let mut bshape = vec![1; hs.len()];
    bshape[0] = b;
    bshape[hs.len() - 1] = width;
    let gamma = gamma.reshape(&bshape);
    let beta = beta.reshape(&bshape);
    h.layer_norm(LAYER_NORM_EPS) * gamma.add_scalar(1.0) + beta
}

/// Regresses AdaLN scale and shift from a conditioning vector.
#[derive(Clone, Debug)]
pub struct AdaLnModulation {
    pub proj: Linear,
    pub width: usize,
}

impl AdaLnModulation {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cond_dim: usize, width: usize) -> Self {
        Self { proj: Linear::new(store, rng, name, cond_dim, 2 * width), width }
    }

    /// Returns `(γ, β)`, each `[B, width]`, from `z: [B, cond_dim]`.
    pub fn gamma_beta<'t>(&self, s: &Session<'t, '_>, z: Var<'t>) -> (Var<'t>, Var<'t>) {
        let gb = self.proj.forward(s, z);
        (gb.narrow(1, 0, self.width), gb.narrow(1, self.width, self.width))
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, h: Var<'t>, z: Var<'t>) -> Var<'t> {
        let (g, b) = self.gamma_beta(s, z);
        adaln(h, g, b)
    }
}

/// Sinusoidal features of diffusion time, `[B, dim]` (`dim` even).
pub fn sinusoidal_features(t: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let x = ti * 1000.0;
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| x * f).collect();
        data.extend(args.iter().map(|a| a.cos()));
        data.extend(args.iter().map(|a| a.sin()));
    }
    Tensor::from_parts(vec![t.len(), 2 * half], data)
}

/// Sinusoidal features followed by a two-layer MLP.
#[derive(Clone, Debug)]
pub struct TimestepEmbedding {
    pub mlp: Mlp,
    pub freq_dim: usize,
}

impl TimestepEmbedding {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, freq_dim: usize, dim: usize) -> Self {
        Self { mlp: Mlp::new(store, rng, name, (freq_dim, dim, dim), Activation::Silu), freq_dim }
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, t: &[f64]) -> Var<'t> {
        let feats = s.constant(sinusoidal_features(t, self.freq_dim));
        self.mlp.forward(s, feats)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, grad_clip: Some(1.0) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Clips, then applies one decoupled-weight-decay Adam update.
    /// A non-finite gradient norm leaves the parameters untouched and errors.
    pub fn step(&mut self, store: &mut ParamStore, mut grads: Vec<Tensor>) -> Result<StepStats> {
        if grads.len() != store.len() {
            return Err(FlagError::Contract(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
        if !norm.is_finite() {
            let worst = grads
                .iter()
                .zip(store.iter())
                .find(|(g, _)| !g.is_finite())
                .map(|(_, (_, name, _))| name.to_string())
                .unwrap_or_default();
            return Err(FlagError::Training {
                step: self.step as usize + 1,
                detail: format!("non-finite gradient (first in `{worst}`)"),
            });
        }
        let mut clipped = false;
        if let Some(max) = self.config.grad_clip {
            let coef = max / (norm + 1e-6);
            if coef < 1.0 {
                clipped = true;
                for g in &mut grads {
                    for x in g.data_mut() {
                        *x *= coef;
                    }
                }
            }
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = &mut store.values[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pj, &gj), mj), vj) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
                *pj -= c.lr * c.weight_decay * *pj;
                *pj -= c.lr * (*mj / bc1) / ((*vj / bc2).sqrt() + c.eps);
            }
        }
        Ok(StepStats { grad_norm: norm, clipped })
    }
}

/// Compares tape gradients of a scalar loss against central differences.
///
/// `loss` builds the loss from a session over `store`; up to `per_param`
/// evenly spaced entries of every parameter are probed. Returns the worst
/// relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    store: &ParamStore,
    loss: impl for<'t> Fn(&Session<'t, '_>) -> Result<Var<'t>>,
    h: f64,
    per_param: usize,
    floor: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let analytic = {
        let s = Session::new(&tape, store);
        let out = loss(&s)?;
        let g = tape.backward(out)?;
        s.param_grads(&g)
    };
    let eval = |st: &ParamStore| -> Result<f64> {
        let tape = Tape::inference();
        let s = Session::new(&tape, st);
        Ok(loss(&s)?.item())
    };
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for (i, grad) in analytic.iter().enumerate() {
        let len = grad.len();
        let stride = len.div_ceil(per_param.max(1)).max(1);
        for j in (0..len).step_by(stride) {
            let orig = probe.values[i].data()[j];
            probe.values[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe.values[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe.values[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
        }
    }
    Ok(worst)
}

impl ParamStore {
    /// Overwrites every parameter with uniform draws in `[-scale, scale]`.
    /// Used to move tests away from special initializations such as zeroed
    /// output heads.
    pub fn randomize(&mut self, rng: &mut impl Rng, scale: f64) {
        for v in &mut self.values {
            for x in v.data_mut() {
                *x = rng.random_range(-scale..=scale);
            }
        }
    }
}
