//! Adam optimizer and the learning-rate schedule.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers::GradMap;
use crate::math;
use crate::tensor::Tensor;

/// Anything that exposes named trainable tensors.
pub trait ParamSet {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each(&mut |name, _| names.push(name.to_string()));
        names
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.numel());
        n
    }
}

/// Per-epoch exponential decay: 3% off per epoch.
pub fn decayed_lr(base: f64, epoch: u32) -> f64 {
    base * math::powf(0.97, epoch as f64)
}

/// Adam with bias correction. Moment buffers are keyed by parameter name so
/// state survives checkpointing by name.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: GradMap,
    pub v: GradMap,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        AdamState { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: GradMap::new(), v: GradMap::new() }
    }

    /// One update over every parameter in `params`. Every parameter must have
    /// a gradient entry (zero-filled for unreached ones by the binder); a
    /// missing entry means the training loop bound names inconsistently.
    pub fn step(&mut self, params: &mut dyn ParamSet, grads: &GradMap, lr: f64) -> Result<()> {
        self.t += 1;
        let t = self.t;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - math::powi(b1, t as i32);
        let bc2 = 1.0 - math::powi(b2, t as i32);
        let mut err: Option<Error> = None;
        let m = &mut self.m;
        let v = &mut self.v;
        params.for_each_mut(&mut |name, tensor| {
            if err.is_some() {
                return;
            }
            let Some(g) = grads.get(name) else {
                err = Some(Error::contract(alloc::format!("no gradient for parameter {name}")));
                return;
            };
            if g.len() != tensor.numel() {
                err = Some(Error::dim(alloc::format!(
                    "gradient for {name} has {} values, parameter has {}",
                    g.len(),
                    tensor.numel()
                )));
                return;
            }
            let ms = m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let vs = v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let data = tensor.data_mut();
            for i in 0..g.len() {
                ms[i] = b1 * ms[i] + (1.0 - b1) * g[i];
                vs[i] = b2 * vs[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                data[i] -= lr * mhat / (math::sqrt(vhat) + eps);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
