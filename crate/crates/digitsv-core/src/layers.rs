//! Trainable layers over the tape, plus parameter naming and binding.
//!
//! Models hold their parameters as plain [`Tensor`]s between steps. At each
//! step a [`ParamBinder`] copies them onto the fresh tape, remembering the
//! dotted parameter name of every leaf so gradients can be collected into a
//! [`GradMap`] after backward. BatchNorm keeps non-trainable running buffers
//! that the training loop advances from the returned batch statistics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::Prng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Gradients (or optimizer moments) keyed by dotted parameter name.
/// BTreeMap so iteration order is deterministic.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Records (name, leaf id) pairs as a model is placed on a tape.
#[derive(Debug, Default)]
pub struct ParamBinder {
    entries: Vec<(String, TensorId)>,
}

impl ParamBinder {
    pub fn new() -> Self {
        ParamBinder { entries: Vec::new() }
    }

    pub fn bind(&mut self, tape: &mut Tape, name: String, t: &Tensor) -> TensorId {
        debug_assert!(t.requires_grad, "binding a tensor that does not require grad: {name}");
        let id = tape.leaf(t.clone());
        self.entries.push((name, id));
        id
    }

    /// Bound (name, leaf id) pairs in binding order.
    pub fn entries(&self) -> &[(String, TensorId)] {
        &self.entries
    }

    /// Collects gradients after `backward`. Parameters the loss never reached
    /// get zero gradients, so an optimizer step over the map is total.
    pub fn grads(&self, tape: &Tape) -> GradMap {
        let mut out = GradMap::new();
        for (name, id) in &self.entries {
            let g = match tape.grad(*id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(*id).numel()],
            };
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Uniform Glorot initialization on the given fan pair.
pub fn xavier_uniform(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut Prng) -> Tensor {
    let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    let mut t = Tensor::new(shape, data).expect("init data is finite");
    t.requires_grad = true;
    t
}

fn zeros_param(shape: Vec<usize>) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.requires_grad = true;
    t
}

fn ones_param(shape: Vec<usize>) -> Tensor {
    let mut t = Tensor::full(shape, 1.0).expect("finite");
    t.requires_grad = true;
    t
}

// ---- Linear ----

/// Affine map stored as `[in, out]` plus optional bias `[out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

pub struct LinearIds {
    pub w: TensorId,
    pub b: Option<TensorId>,
}

impl Linear {
    pub fn init(in_dim: usize, out_dim: usize, bias: bool, rng: &mut Prng) -> Self {
        Linear {
            w: xavier_uniform(vec![in_dim, out_dim], in_dim, out_dim, rng),
            b: bias.then(|| zeros_param(vec![out_dim])),
        }
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut ParamBinder, prefix: &str) -> LinearIds {
        LinearIds {
            w: binder.bind(tape, format!("{prefix}.weight"), &self.w),
            b: self.b.as_ref().map(|b| binder.bind(tape, format!("{prefix}.bias"), b)),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.weight"), &self.w);
        if let Some(b) = &self.b {
            f(&format!("{prefix}.bias"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.weight"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&format!("{prefix}.bias"), b);
        }
    }
}

impl LinearIds {
    /// `[B, in] -> [B, out]`.
    pub fn forward_rows(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let y = tape.matmul(x, self.w)?;
        match self.b {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }

    /// Projects the channel axis: `[in, T] -> [out, T]`.
    pub fn forward_cols(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let wt = tape.transpose(self.w)?;
        let y = tape.matmul(wt, x)?;
        match self.b {
            Some(b) => {
                let out_dim = tape.value(b).numel();
                let bc = tape.reshape(b, vec![out_dim, 1])?;
                tape.add(y, bc)
            }
            None => Ok(y),
        }
    }
}

// ---- Conv1d ----

#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub w: Tensor, // [C_out, C_in, K]
    pub b: Option<Tensor>,
    pub dilation: usize,
    pub padding: usize,
}

pub struct Conv1dIds {
    pub w: TensorId,
    pub b: Option<TensorId>,
    dilation: usize,
    padding: usize,
}

impl Conv1dLayer {
    /// Same-length convolution: padding = dilation*(K-1)/2 (K odd).
    pub fn init_same(c_in: usize, c_out: usize, k: usize, dilation: usize, bias: bool, rng: &mut Prng) -> Self {
        debug_assert!(k % 2 == 1, "same padding requires odd kernel");
        Conv1dLayer {
            w: xavier_uniform(vec![c_out, c_in, k], c_in * k, c_out * k, rng),
            b: bias.then(|| zeros_param(vec![c_out])),
            dilation,
            padding: dilation * (k - 1) / 2,
        }
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut ParamBinder, prefix: &str) -> Conv1dIds {
        Conv1dIds {
            w: binder.bind(tape, format!("{prefix}.weight"), &self.w),
            b: self.b.as_ref().map(|b| binder.bind(tape, format!("{prefix}.bias"), b)),
            dilation: self.dilation,
            padding: self.padding,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.weight"), &self.w);
        if let Some(b) = &self.b {
            f(&format!("{prefix}.bias"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.weight"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&format!("{prefix}.bias"), b);
        }
    }
}

impl Conv1dIds {
    /// `[C_in, T] -> [C_out, T_out]`.
    pub fn forward(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let y = tape.conv1d(x, self.w, self.dilation, self.padding)?;
        match self.b {
            Some(b) => {
                let c_out = tape.value(b).numel();
                let bc = tape.reshape(b, vec![c_out, 1])?;
                tape.add(y, bc)
            }
            None => Ok(y),
        }
    }
}

// ---- BatchNorm ----

/// Which axis carries the normalization population.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnAxis {
    /// Input `[F, T]`: statistics over the time axis of the graph.
    Time,
    /// Input `[B, F]`: statistics over the batch rows.
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed during a train-mode forward, used by the
/// training loop to advance the running buffers.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub axis: BnAxis,
}

impl BatchNorm1d {
    pub fn new(features: usize, axis: BnAxis) -> Self {
        BatchNorm1d {
            gamma: ones_param(vec![features]),
            beta: zeros_param(vec![features]),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: 0.1,
            eps: 1e-5,
            axis,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.numel()
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut ParamBinder, prefix: &str) -> BnIds {
        BnIds {
            gamma: binder.bind(tape, format!("{prefix}.gamma"), &self.gamma),
            beta: binder.bind(tape, format!("{prefix}.beta"), &self.beta),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            eps: self.eps,
            axis: self.axis,
            features: self.features(),
        }
    }

    /// Folds one batch observation into the running buffers.
    pub fn update_running(&mut self, stats: &BnStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }

    /// Buffers are checkpointed alongside parameters but never optimized.
    pub fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}.running_mean"), &self.running_mean);
        f(&format!("{prefix}.running_var"), &self.running_var);
    }

    pub fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        f(&format!("{prefix}.running_mean"), &mut self.running_mean);
        f(&format!("{prefix}.running_var"), &mut self.running_var);
    }
}

pub struct BnIds {
    gamma: TensorId,
    beta: TensorId,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    eps: f64,
    axis: BnAxis,
    features: usize,
}

impl BnIds {
    /// Normalizes `x`; in train mode also returns the batch statistics.
    pub fn forward(&self, tape: &mut Tape, x: TensorId, mode: Mode) -> Result<(TensorId, Option<BnStats>)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim(format!("batchnorm expects rank 2, got {shape:?}")));
        }
        let (feat_ok, stat_axis) = match self.axis {
            BnAxis::Time => (shape[0] == self.features, 1usize),
            BnAxis::Batch => (shape[1] == self.features, 0usize),
        };
        if !feat_ok {
            return Err(Error::dim(format!(
                "batchnorm over {} features got input {shape:?}",
                self.features
            )));
        }
        let (mean_id, var_id, stats) = match mode {
            Mode::Train => {
                let mean = tape.mean_axis(x, stat_axis)?;
                let mean_b = self.broadcastable(tape, mean)?;
                let diff = tape.sub(x, mean_b)?;
                let sq = tape.mul(diff, diff)?;
                let var = tape.mean_axis(sq, stat_axis)?;
                let stats = BnStats { mean: tape.data(mean).to_vec(), var: tape.data(var).to_vec() };
                (mean, var, Some(stats))
            }
            Mode::Eval => {
                let mean = tape.constant(Tensor::from_vec(self.running_mean.clone())?);
                let var = tape.constant(Tensor::from_vec(self.running_var.clone())?);
                (mean, var, None)
            }
        };
        let mean_b = self.broadcastable(tape, mean_id)?;
        let var_b = self.broadcastable(tape, var_id)?;
        let centered = tape.sub(x, mean_b)?;
        let shifted_var = tape.affine(var_b, 1.0, self.eps)?;
        let denom = tape.sqrt(shifted_var)?;
        let xhat = tape.div(centered, denom)?;
        let gamma_b = self.broadcastable(tape, self.gamma)?;
        let beta_b = self.broadcastable(tape, self.beta)?;
        let scaled = tape.mul(xhat, gamma_b)?;
        let out = tape.add(scaled, beta_b)?;
        Ok((out, stats))
    }

    /// Reshapes a per-feature vector for broadcasting against the input.
    fn broadcastable(&self, tape: &mut Tape, v: TensorId) -> Result<TensorId> {
        match self.axis {
            BnAxis::Time => tape.reshape(v, vec![self.features, 1]),
            // [B, F] (+) [F] broadcasts by trailing-axis rules as-is
            BnAxis::Batch => Ok(v),
        }
    }
}

// ---- LayerNorm ----

/// Per-position normalization over the last axis of `[T, F]`.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

pub struct LayerNormIds {
    gamma: TensorId,
    beta: TensorId,
    eps: f64,
}

impl LayerNorm {
    pub fn new(features: usize) -> Self {
        LayerNorm { gamma: ones_param(vec![features]), beta: zeros_param(vec![features]), eps: 1e-5 }
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut ParamBinder, prefix: &str) -> LayerNormIds {
        LayerNormIds {
            gamma: binder.bind(tape, format!("{prefix}.gamma"), &self.gamma),
            beta: binder.bind(tape, format!("{prefix}.beta"), &self.beta),
            eps: self.eps,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

impl LayerNormIds {
    pub fn forward(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let (t, _f) = tape.value(x).dims2()?;
        let mean = tape.mean_axis(x, 1)?;
        let mean_c = tape.reshape(mean, vec![t, 1])?;
        let centered = tape.sub(x, mean_c)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.mean_axis(sq, 1)?;
        let var_c = tape.reshape(var, vec![t, 1])?;
        let shifted = tape.affine(var_c, 1.0, self.eps)?;
        let denom = tape.sqrt(shifted)?;
        let xhat = tape.div(centered, denom)?;
        let scaled = tape.mul(xhat, self.gamma)?;
        tape.add(scaled, self.beta)
    }
}

// ---- positional encoding ----

/// Sinusoidal position table of shape `[t_len, d_model]`.
pub fn sinusoidal_posenc(t_len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; t_len * d_model];
    for t in 0..t_len {
        for i in 0..d_model {
            let pair = (i / 2) as f64;
            let rate = math::powf(10000.0, -2.0 * pair / d_model as f64);
            let angle = t as f64 * rate;
            data[t * d_model + i] = if i % 2 == 0 { math::sin(angle) } else { math::cos(angle) };
        }
    }
    Tensor::new(vec![t_len, d_model], data).expect("finite")
}
