//! Attentive pooling heads: ASP, multi-head ASP, sliding-window ASP, and
//! their multi-scale combination.
//!
//! Orientation is channels x time throughout: the pooling input is `[C, T]`
//! and every head reduces it to a fixed-length vector. In MHASP the attention
//! weights are computed from the self-attention output A while the first- and
//! second-order statistics are taken over the pooling input X itself; with
//! zero score parameters every head therefore degenerates to the arithmetic
//! mean and variance of X, which the tests pin.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers::{xavier_uniform, ParamBinder};
use crate::math;
use crate::rng::Prng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Added under the square root so sigma stays differentiable at zero variance.
pub const SIGMA_EPS: f64 = 1e-9;

fn zeros_grad(shape: Vec<usize>) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.requires_grad = true;
    t
}

// ---- ASP score network (Eq. 8) ----

/// Bottleneck score MLP: `w2 tanh(w1 S + b1) + b2` over a `[C_score, T]`
/// score source, emitting `[C_pool, T]` pre-softmax scores.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w1: Tensor, // [hidden, c_score]
    pub b1: Tensor, // [hidden, 1]
    pub w2: Tensor, // [c_pool, hidden]
    pub b2: Tensor, // [c_pool, 1]
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionIds {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

impl AttentionParams {
    pub fn init(c_score: usize, c_pool: usize, hidden: usize, rng: &mut Prng) -> Self {
        AttentionParams {
            w1: xavier_uniform(vec![hidden, c_score], c_score, hidden, rng),
            b1: zeros_grad(vec![hidden, 1]),
            w2: xavier_uniform(vec![c_pool, hidden], hidden, c_pool, rng),
            b2: zeros_grad(vec![c_pool, 1]),
        }
    }

    /// All-zero parameters: uniform attention, plain statistics.
    pub fn zeros(c_score: usize, c_pool: usize, hidden: usize) -> Self {
        AttentionParams {
            w1: zeros_grad(vec![hidden, c_score]),
            b1: zeros_grad(vec![hidden, 1]),
            w2: zeros_grad(vec![c_pool, hidden]),
            b2: zeros_grad(vec![c_pool, 1]),
        }
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut ParamBinder, prefix: &str) -> AttentionIds {
        AttentionIds {
            w1: binder.bind(tape, format!("{prefix}.w1"), &self.w1),
            b1: binder.bind(tape, format!("{prefix}.b1"), &self.b1),
            w2: binder.bind(tape, format!("{prefix}.w2"), &self.w2),
            b2: binder.bind(tape, format!("{prefix}.b2"), &self.b2),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.w1"), &self.w1);
        f(&format!("{prefix}.b1"), &self.b1);
        f(&format!("{prefix}.w2"), &self.w2);
        f(&format!("{prefix}.b2"), &self.b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.b1"), &mut self.b1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.b2"), &mut self.b2);
    }
}

/// Attention-weighted statistics ids: `var` is pre-epsilon, `sigma` is
/// `sqrt(max(var, 0) + SIGMA_EPS)`.
#[derive(Debug, Clone, Copy)]
pub struct StatsIds {
    pub mu: TensorId,
    pub var: TensorId,
    pub sigma: TensorId,
}

/// Scores come from `score_src` (`[C_score, T]`), statistics pool `pooled`
/// (`[C, T]`); the two coincide for plain ASP.
pub(crate) fn attend_stats_scored(
    tape: &mut Tape,
    score_src: TensorId,
    pooled: TensorId,
    p: &AttentionIds,
) -> Result<StatsIds> {
    let (st, tt) = tape.value(score_src).dims2()?;
    let (_, t) = tape.value(pooled).dims2()?;
    if tt != t {
        return Err(Error::dim(format!(
            "attend_stats: score source has {tt} frames, pooled input {t}"
        )));
    }
    let _ = st;
    let h = tape.matmul(p.w1, score_src)?;
    let h = tape.add(h, p.b1)?;
    let h = tape.tanh(h)?;
    let scores = tape.matmul(p.w2, h)?;
    let scores = tape.add(scores, p.b2)?;
    let alpha = tape.softmax(scores, 1)?;
    let ax = tape.mul(alpha, pooled)?;
    let mu = tape.sum_axis(ax, 1)?;
    let xx = tape.mul(pooled, pooled)?;
    let axx = tape.mul(alpha, xx)?;
    let ex2 = tape.sum_axis(axx, 1)?;
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.sub(ex2, mu2)?;
    let clamped = tape.relu(var)?;
    let shifted = tape.affine(clamped, 1.0, SIGMA_EPS)?;
    let sigma = tape.sqrt(shifted)?;
    Ok(StatsIds { mu, var, sigma })
}

/// ASP over `x: [C, T]` (Eqs. 8-10 with the score source equal to x).
pub fn attend_stats(tape: &mut Tape, x: TensorId, p: &AttentionIds) -> Result<StatsIds> {
    attend_stats_scored(tape, x, x, p)
}

/// Eagerly evaluated pooled statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledStats {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub fn attend_stats_eval(x: &Tensor, p: &AttentionParams) -> Result<PooledStats> {
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new();
    let ids = p.bind(&mut tape, &mut binder, "asp");
    let xid = tape.constant(x.clone());
    let s = attend_stats(&mut tape, xid, &ids)?;
    Ok(PooledStats {
        mu: tape.data(s.mu).to_vec(),
        var: tape.data(s.var).to_vec(),
        sigma: tape.data(s.sigma).to_vec(),
    })
}

// ---- scaled dot-product attention (Eq. 7) ----

/// `Softmax(Q K^T / sqrt(d_k)) V` with `Q, K, V: [T, d_k]`.
pub fn scaled_dot_attention(tape: &mut Tape, q: TensorId, k: TensorId, v: TensorId) -> Result<TensorId> {
    let (tq, dq) = tape.value(q).dims2()?;
    let (tk, dk) = tape.value(k).dims2()?;
    let (tv, dv) = tape.value(v).dims2()?;
    if tq != tk || tq != tv || dq != dk || dq != dv {
        return Err(Error::dim(format!(
            "attention: Q {tq}x{dq}, K {tk}x{dk}, V {tv}x{dv} must share shape"
        )));
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.affine(logits, 1.0 / math::sqrt(dq as f64), 0.0)?;
    let attn = tape.softmax(scaled, 1)?;
    tape.matmul(attn, v)
}

// ---- MHASP (Eqs. 6-10 + projection) ----

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub wq: Tensor, // [d_k, c]
    pub wk: Tensor,
    pub wv: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
}

/// One MHASP stage: per-head Q/K/V projections, shared score MLP over the
/// concatenated attention output, and the `[C, 2C]` projection of mu||sigma
/// back to C.
#[derive(Debug, Clone)]
pub struct MhaspParams {
    pub heads: Vec<HeadParams>,
    pub stats: AttentionParams,
    pub proj: Tensor, // [c, 2c]
}

#[derive(Debug, Clone)]
pub struct MhaspIds {
    pub heads: Vec<HeadIds>,
    pub stats: AttentionIds,
    pub proj: TensorId,
}

impl MhaspParams {
    pub fn init(c: usize, n_heads: usize, d_k: usize, hidden: usize, rng: &mut Prng) -> Self {
        let heads = (0..n_heads)
            .map(|_| HeadParams {
                wq: xavier_uniform(vec![d_k, c], c, d_k, rng),
                wk: xavier_uniform(vec![d_k, c], c, d_k, rng),
                wv: xavier_uniform(vec![d_k, c], c, d_k, rng),
            })
            .collect();
        MhaspParams {
            heads,
            stats: AttentionParams::init(n_heads * d_k, c, hidden, rng),
            proj: xavier_uniform(vec![c, 2 * c], 2 * c, c, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut ParamBinder, prefix: &str) -> MhaspIds {
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(h, hp)| HeadIds {
                wq: binder.bind(tape, format!("{prefix}.head{h}.wq"), &hp.wq),
                wk: binder.bind(tape, format!("{prefix}.head{h}.wk"), &hp.wk),
                wv: binder.bind(tape, format!("{prefix}.head{h}.wv"), &hp.wv),
            })
            .collect();
        MhaspIds {
            heads,
            stats: self.stats.bind(tape, binder, &format!("{prefix}.stats")),
            proj: binder.bind(tape, format!("{prefix}.proj"), &self.proj),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (h, hp) in self.heads.iter().enumerate() {
            f(&format!("{prefix}.head{h}.wq"), &hp.wq);
            f(&format!("{prefix}.head{h}.wk"), &hp.wk);
            f(&format!("{prefix}.head{h}.wv"), &hp.wv);
        }
        self.stats.visit(&format!("{prefix}.stats"), f);
        f(&format!("{prefix}.proj"), &self.proj);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (h, hp) in self.heads.iter_mut().enumerate() {
            f(&format!("{prefix}.head{h}.wq"), &mut hp.wq);
            f(&format!("{prefix}.head{h}.wk"), &mut hp.wk);
            f(&format!("{prefix}.head{h}.wv"), &mut hp.wv);
        }
        self.stats.visit_mut(&format!("{prefix}.stats"), f);
        f(&format!("{prefix}.proj"), &mut self.proj);
    }
}

/// Multi-head attentive statistics pooling of `x: [C, T]` to a length-C vector.
pub fn mhasp(tape: &mut Tape, x: TensorId, p: &MhaspIds) -> Result<TensorId> {
    let (c, _t) = tape.value(x).dims2()?;
    let mut head_outs = Vec::with_capacity(p.heads.len());
    for h in &p.heads {
        let q = tape.matmul(h.wq, x)?;
        let q = tape.transpose(q)?;
        let k = tape.matmul(h.wk, x)?;
        let k = tape.transpose(k)?;
        let v = tape.matmul(h.wv, x)?;
        let v = tape.transpose(v)?;
        head_outs.push(scaled_dot_attention(tape, q, k, v)?);
    }
    let a = tape.concat(&head_outs, 1)?;
    let a = tape.transpose(a)?;
    let stats = attend_stats_scored(tape, a, x, &p.stats)?;
    let musig = tape.concat(&[stats.mu, stats.sigma], 0)?;
    let col = tape.reshape(musig, vec![2 * c, 1])?;
    let out = tape.matmul(p.proj, col)?;
    tape.reshape(out, vec![c])
}

// ---- sliding windows ----

/// Window starts every `s` frames while a full window fits; a tail window
/// `[T-w, T)` covers any remainder. `w` clamps to `T` on short inputs.
/// Returns `(start, len)` pairs.
pub fn segment_windows(t: usize, w: usize, s: usize) -> Result<Vec<(usize, usize)>> {
    if t == 0 {
        return Err(Error::contract("segment_windows: empty time axis"));
    }
    if w == 0 || s == 0 {
        return Err(Error::contract("segment_windows: window and stride must be >= 1"));
    }
    let w = w.min(t);
    let mut windows = Vec::new();
    let mut start = 0;
    while start + w <= t {
        windows.push((start, w));
        start += s;
    }
    let (last_start, _) = *windows.last().expect("w <= t guarantees one window");
    if last_start + w < t {
        windows.push((t - w, w));
    }
    Ok(windows)
}

// ---- SWASP ----

#[derive(Debug, Clone)]
pub struct SwaspParams {
    pub window: usize,
    pub stride: usize,
    /// Shared across all windows.
    pub inner: MhaspParams,
    /// Pools the stacked window vectors; `None` reuses the inner parameters.
    pub outer: Option<MhaspParams>,
}

#[derive(Debug, Clone)]
pub struct SwaspIds {
    pub window: usize,
    pub stride: usize,
    pub inner: MhaspIds,
    pub outer: MhaspIds,
}

impl SwaspParams {
    pub fn init(
        c: usize,
        window: usize,
        stride: usize,
        n_heads: usize,
        d_k: usize,
        hidden: usize,
        share_outer: bool,
        rng: &mut Prng,
    ) -> Self {
        SwaspParams {
            window,
            stride,
            inner: MhaspParams::init(c, n_heads, d_k, hidden, rng),
            outer: (!share_outer).then(|| MhaspParams::init(c, n_heads, d_k, hidden, rng)),
        }
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut ParamBinder, prefix: &str) -> SwaspIds {
        let inner = self.inner.bind(tape, binder, &format!("{prefix}.inner"));
        // shared outer reuses the inner leaf ids so gradients accumulate once
        let outer = match &self.outer {
            Some(o) => o.bind(tape, binder, &format!("{prefix}.outer")),
            None => inner.clone(),
        };
        SwaspIds { window: self.window, stride: self.stride, inner, outer }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.inner.visit(&format!("{prefix}.inner"), f);
        if let Some(o) = &self.outer {
            o.visit(&format!("{prefix}.outer"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.inner.visit_mut(&format!("{prefix}.inner"), f);
        if let Some(o) = &mut self.outer {
            o.visit_mut(&format!("{prefix}.outer"), f);
        }
    }
}

/// Sliding-window MHASP: pool each window, stack the window vectors along a
/// new time axis, pool again.
pub fn swasp(tape: &mut Tape, m: TensorId, p: &SwaspIds) -> Result<TensorId> {
    let (_c, t) = tape.value(m).dims2()?;
    let windows = segment_windows(t, p.window, p.stride)?;
    let mut pooled = Vec::with_capacity(windows.len());
    for (start, len) in windows {
        let xw = tape.slice(m, 1, start, len)?;
        pooled.push(mhasp(tape, xw, &p.inner)?);
    }
    let stacked = tape.stack_rows(&pooled)?;
    let stacked = tape.transpose(stacked)?;
    mhasp(tape, stacked, &p.outer)
}

// ---- multi-scale combination ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingKind {
    Asp,
    Mhasp,
    Swasp,
    AspSwasp,
    MhaspSwasp,
    AspMhaspSwasp,
}

impl PoolingKind {
    pub fn parse(s: &str) -> Result<PoolingKind> {
        match s {
            "asp" => Ok(PoolingKind::Asp),
            "mhasp" => Ok(PoolingKind::Mhasp),
            "swasp" => Ok(PoolingKind::Swasp),
            "asp+swasp" => Ok(PoolingKind::AspSwasp),
            "mhasp+swasp" => Ok(PoolingKind::MhaspSwasp),
            "asp+mhasp+swasp" => Ok(PoolingKind::AspMhaspSwasp),
            _ => Err(Error::vocab(format!("unknown pooling kind {s:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PoolingKind::Asp => "asp",
            PoolingKind::Mhasp => "mhasp",
            PoolingKind::Swasp => "swasp",
            PoolingKind::AspSwasp => "asp+swasp",
            PoolingKind::MhaspSwasp => "mhasp+swasp",
            PoolingKind::AspMhaspSwasp => "asp+mhasp+swasp",
        }
    }

    pub fn uses_asp(&self) -> bool {
        matches!(self, PoolingKind::Asp | PoolingKind::AspSwasp | PoolingKind::AspMhaspSwasp)
    }

    pub fn uses_mhasp(&self) -> bool {
        matches!(self, PoolingKind::Mhasp | PoolingKind::MhaspSwasp | PoolingKind::AspMhaspSwasp)
    }

    pub fn uses_swasp(&self) -> bool {
        matches!(
            self,
            PoolingKind::Swasp | PoolingKind::AspSwasp | PoolingKind::MhaspSwasp | PoolingKind::AspMhaspSwasp
        )
    }

    /// Width of the pooled vector for channel count `c`: ASP contributes
    /// mu||sigma (2c), MHASP and SWASP contribute c each.
    pub fn out_dim(&self, c: usize) -> usize {
        let mut d = 0;
        if self.uses_asp() {
            d += 2 * c;
        }
        if self.uses_mhasp() {
            d += c;
        }
        if self.uses_swasp() {
            d += c;
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolingConfig {
    pub kind: PoolingKind,
    pub window: usize,
    pub stride: usize,
    pub heads: usize,
    /// Per-head Q/K/V width; `None` means `c / heads`.
    pub d_k: Option<usize>,
    pub hidden: usize,
    pub share_outer: bool,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig {
            kind: PoolingKind::AspSwasp,
            window: 32,
            stride: 16,
            heads: 2,
            d_k: None,
            hidden: 32,
            share_outer: false,
        }
    }
}

impl PoolingConfig {
    pub fn resolved_d_k(&self, c: usize) -> usize {
        self.d_k.unwrap_or_else(|| (c / self.heads).max(1))
    }

    pub fn validate(&self, c: usize) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::contract("pooling: window and stride must be >= 1"));
        }
        if self.heads == 0 || self.hidden == 0 {
            return Err(Error::contract("pooling: heads and hidden must be >= 1"));
        }
        if self.resolved_d_k(c) == 0 {
            return Err(Error::contract("pooling: d_k must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PoolingParams {
    pub kind: PoolingKind,
    pub asp: Option<AttentionParams>,
    pub mhasp: Option<MhaspParams>,
    pub swasp: Option<SwaspParams>,
}

#[derive(Debug, Clone)]
pub struct PoolingIds {
    pub kind: PoolingKind,
    pub asp: Option<AttentionIds>,
    pub mhasp: Option<MhaspIds>,
    pub swasp: Option<SwaspIds>,
}

impl PoolingParams {
    pub fn init(c: usize, cfg: &PoolingConfig, rng: &mut Prng) -> Result<Self> {
        cfg.validate(c)?;
        let d_k = cfg.resolved_d_k(c);
        Ok(PoolingParams {
            kind: cfg.kind,
            asp: cfg.kind.uses_asp().then(|| AttentionParams::init(c, c, cfg.hidden, rng)),
            mhasp: cfg
                .kind
                .uses_mhasp()
                .then(|| MhaspParams::init(c, cfg.heads, d_k, cfg.hidden, rng)),
            swasp: cfg.kind.uses_swasp().then(|| {
                SwaspParams::init(c, cfg.window, cfg.stride, cfg.heads, d_k, cfg.hidden, cfg.share_outer, rng)
            }),
        })
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut ParamBinder, prefix: &str) -> PoolingIds {
        PoolingIds {
            kind: self.kind,
            asp: self.asp.as_ref().map(|p| p.bind(tape, binder, &format!("{prefix}.asp"))),
            mhasp: self.mhasp.as_ref().map(|p| p.bind(tape, binder, &format!("{prefix}.mhasp"))),
            swasp: self.swasp.as_ref().map(|p| p.bind(tape, binder, &format!("{prefix}.swasp"))),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Some(p) = &self.asp {
            p.visit(&format!("{prefix}.asp"), f);
        }
        if let Some(p) = &self.mhasp {
            p.visit(&format!("{prefix}.mhasp"), f);
        }
        if let Some(p) = &self.swasp {
            p.visit(&format!("{prefix}.swasp"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(p) = &mut self.asp {
            p.visit_mut(&format!("{prefix}.asp"), f);
        }
        if let Some(p) = &mut self.mhasp {
            p.visit_mut(&format!("{prefix}.mhasp"), f);
        }
        if let Some(p) = &mut self.swasp {
            p.visit_mut(&format!("{prefix}.swasp"), f);
        }
    }
}

/// Pools `m: [C, T]` to a vector of width `kind.out_dim(C)`; branch outputs
/// concatenate in asp, mhasp, swasp order.
pub fn multiscale_pool(tape: &mut Tape, m: TensorId, p: &PoolingIds) -> Result<TensorId> {
    let mut parts = Vec::new();
    if let Some(asp) = &p.asp {
        let s = attend_stats(tape, m, asp)?;
        parts.push(s.mu);
        parts.push(s.sigma);
    }
    if let Some(mh) = &p.mhasp {
        parts.push(mhasp(tape, m, mh)?);
    }
    if let Some(sw) = &p.swasp {
        parts.push(swasp(tape, m, sw)?);
    }
    if parts.is_empty() {
        return Err(Error::contract("pooling: no branches configured"));
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat(&parts, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> Prng {
        Prng::seed_from_u64(seed)
    }

    fn random_matrix(c: usize, t: usize, rng: &mut Prng) -> Tensor {
        let data: Vec<f64> = (0..c * t).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor::new(vec![c, t], data).unwrap()
    }

    #[test]
    fn zero_params_give_arithmetic_stats() {
        let mut r = rng(1);
        let c = 5;
        let t = 9;
        let x = random_matrix(c, t, &mut r);
        let stats = attend_stats_eval(&x, &AttentionParams::zeros(c, c, 4)).unwrap();
        for ch in 0..c {
            let row = &x.data()[ch * t..(ch + 1) * t];
            let mean: f64 = row.iter().sum::<f64>() / t as f64;
            let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / t as f64 - mean * mean;
            assert!((stats.mu[ch] - mean).abs() < 1e-10);
            assert!((stats.var[ch] - var).abs() < 1e-10);
            assert!((stats.sigma[ch] - math::sqrt(var.max(0.0) + SIGMA_EPS)).abs() < 1e-10);
        }
    }

    #[test]
    fn single_frame_collapses_sigma() {
        let mut r = rng(2);
        let c = 4;
        let x = random_matrix(c, 1, &mut r);
        let p = AttentionParams::init(c, c, 8, &mut r);
        let stats = attend_stats_eval(&x, &p).unwrap();
        for ch in 0..c {
            assert!((stats.mu[ch] - x.data()[ch]).abs() < 1e-12);
            assert!(stats.sigma[ch] <= 1e-4);
        }
    }

    #[test]
    fn hand_oracle_two_by_two() {
        // c = 2, t = 2, hidden = 2 evaluated with scalar arithmetic
        let w1 = [[0.3, -0.2], [0.1, 0.4]];
        let b1 = [0.05, -0.1];
        let w2 = [[0.2, 0.7], [-0.3, 0.5]];
        let b2 = [0.1, -0.2];
        let x = [[1.0, -0.5], [0.25, 0.75]];
        let mut score = [[0.0; 2]; 2];
        for t in 0..2 {
            let h: Vec<f64> = (0..2)
                .map(|j| math::tanh(w1[j][0] * x[0][t] + w1[j][1] * x[1][t] + b1[j]))
                .collect();
            for ch in 0..2 {
                score[ch][t] = w2[ch][0] * h[0] + w2[ch][1] * h[1] + b2[ch];
            }
        }
        let mut expect_mu = [0.0; 2];
        let mut expect_var = [0.0; 2];
        for ch in 0..2 {
            let m = score[ch][0].max(score[ch][1]);
            let e0 = math::exp(score[ch][0] - m);
            let e1 = math::exp(score[ch][1] - m);
            let a0 = e0 / (e0 + e1);
            let a1 = e1 / (e0 + e1);
            expect_mu[ch] = a0 * x[ch][0] + a1 * x[ch][1];
            expect_var[ch] = a0 * x[ch][0] * x[ch][0] + a1 * x[ch][1] * x[ch][1] - expect_mu[ch] * expect_mu[ch];
        }

        let mk = |shape: Vec<usize>, data: Vec<f64>| {
            let mut t = Tensor::new(shape, data).unwrap();
            t.requires_grad = true;
            t
        };
        let p = AttentionParams {
            w1: mk(vec![2, 2], vec![0.3, -0.2, 0.1, 0.4]),
            b1: mk(vec![2, 1], vec![0.05, -0.1]),
            w2: mk(vec![2, 2], vec![0.2, 0.7, -0.3, 0.5]),
            b2: mk(vec![2, 1], vec![0.1, -0.2]),
        };
        let xt = Tensor::new(vec![2, 2], vec![1.0, -0.5, 0.25, 0.75]).unwrap();
        let stats = attend_stats_eval(&xt, &p).unwrap();
        for ch in 0..2 {
            assert!((stats.mu[ch] - expect_mu[ch]).abs() < 1e-12);
            assert!((stats.var[ch] - expect_var[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        // pooling all-ones: mu per channel is exactly the alpha row sum
        let mut r = rng(3);
        let c = 6;
        let t = 11;
        let p = AttentionParams::init(c, c, 16, &mut r);
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new();
        let ids = p.bind(&mut tape, &mut binder, "asp");
        let score = tape.constant(random_matrix(c, t, &mut r));
        let ones = tape.constant(Tensor::full(vec![c, t], 1.0).unwrap());
        let stats = attend_stats_scored(&mut tape, score, ones, &ids).unwrap();
        for &m in tape.data(stats.mu) {
            assert!((m - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn asp_is_frame_permutation_invariant() {
        let mut r = rng(4);
        let c = 5;
        let t = 12;
        let x = random_matrix(c, t, &mut r);
        let p = AttentionParams::init(c, c, 8, &mut r);
        let base = attend_stats_eval(&x, &p).unwrap();
        let mut perm: Vec<usize> = (0..t).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut r);
        let mut pd = vec![0.0; c * t];
        for (new_t, &old_t) in perm.iter().enumerate() {
            for ch in 0..c {
                pd[ch * t + new_t] = x.data()[ch * t + old_t];
            }
        }
        let permuted = attend_stats_eval(&Tensor::new(vec![c, t], pd).unwrap(), &p).unwrap();
        for ch in 0..c {
            assert!((base.mu[ch] - permuted.mu[ch]).abs() < 1e-10);
            assert!((base.sigma[ch] - permuted.sigma[ch]).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_single_frame_is_identity() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![1, 3], vec![0.2, -1.0, 0.5]).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, -0.5]).unwrap());
        let v = tape.constant(Tensor::new(vec![1, 3], vec![0.7, 0.1, -0.3]).unwrap());
        let a = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        assert_eq!(tape.data(a), &[0.7, 0.1, -0.3]);
    }

    #[test]
    fn zero_queries_average_values() {
        let mut r = rng(5);
        let mut tape = Tape::new();
        let t = 4;
        let d = 3;
        let q = tape.constant(Tensor::zeros(vec![t, d]));
        let k = tape.constant(random_matrix(t, d, &mut r));
        let vt = random_matrix(t, d, &mut r);
        let v = tape.constant(vt.clone());
        let a = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        for row in 0..t {
            for col in 0..d {
                let mean: f64 = (0..t).map(|i| vt.data()[i * d + col]).sum::<f64>() / t as f64;
                assert!((tape.data(a)[row * d + col] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_hand_evaluation() {
        // t = 3, d_k = 2
        let qd = [[0.5, -0.2], [1.0, 0.3], [-0.4, 0.8]];
        let kd = [[0.1, 0.9], [-0.6, 0.4], [0.7, -0.1]];
        let vd = [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
        let mut expect = [[0.0; 2]; 3];
        let scale = 1.0 / math::sqrt(2.0);
        for i in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|j| scale * (qd[i][0] * kd[j][0] + qd[i][1] * kd[j][1]))
                .collect();
            let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = logits.iter().map(|&l| math::exp(l - m)).collect();
            let z: f64 = exps.iter().sum();
            for col in 0..2 {
                expect[i][col] = (0..3).map(|j| exps[j] / z * vd[j][col]).sum();
            }
        }
        let flat = |m: &[[f64; 2]; 3]| m.iter().flatten().copied().collect::<Vec<f64>>();
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![3, 2], flat(&qd)).unwrap());
        let k = tape.constant(Tensor::new(vec![3, 2], flat(&kd)).unwrap());
        let v = tape.constant(Tensor::new(vec![3, 2], flat(&vd)).unwrap());
        let a = scaled_dot_attention(&mut tape, q, k, v).unwrap();
        for i in 0..3 {
            for col in 0..2 {
                assert!((tape.data(a)[i * 2 + col] - expect[i][col]).abs() < 1e-12);
            }
        }
    }

    fn eval_mhasp(x: &Tensor, p: &MhaspParams) -> Vec<f64> {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new();
        let ids = p.bind(&mut tape, &mut binder, "mh");
        let xid = tape.constant(x.clone());
        let out = mhasp(&mut tape, xid, &ids).unwrap();
        tape.data(out).to_vec()
    }

    #[test]
    fn mhasp_output_length_is_c() {
        let mut r = rng(6);
        let c = 6;
        let p = MhaspParams::init(c, 2, 3, 8, &mut r);
        for t in [1, 7, 50] {
            let x = random_matrix(c, t, &mut r);
            assert_eq!(eval_mhasp(&x, &p).len(), c);
        }
    }

    #[test]
    fn mhasp_with_zero_scores_degenerates_to_asp_plus_projection() {
        let mut r = rng(7);
        let c = 4;
        let t = 6;
        let x = random_matrix(c, t, &mut r);
        // single head, identity Q/K/V, zero score parameters
        let mut eye = Tensor::zeros(vec![c, c]);
        for i in 0..c {
            eye.data_mut()[i * c + i] = 1.0;
        }
        eye.requires_grad = true;
        let proj = xavier_uniform(vec![c, 2 * c], 2 * c, c, &mut r);
        let p = MhaspParams {
            heads: vec![HeadParams { wq: eye.clone(), wk: eye.clone(), wv: eye.clone() }],
            stats: AttentionParams::zeros(c, c, 3),
            proj: proj.clone(),
        };
        let got = eval_mhasp(&x, &p);
        let stats = attend_stats_eval(&x, &AttentionParams::zeros(c, c, 3)).unwrap();
        let musig: Vec<f64> = stats.mu.iter().chain(stats.sigma.iter()).copied().collect();
        for i in 0..c {
            let expect: f64 = (0..2 * c).map(|j| proj.data()[i * 2 * c + j] * musig[j]).sum();
            assert!((got[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn window_arithmetic_matches_the_figure() {
        let w = segment_windows(200, 50, 25).unwrap();
        assert_eq!(w.len(), 7);
        let starts: Vec<usize> = w.iter().map(|&(s, _)| s).collect();
        assert_eq!(starts, [0, 25, 50, 75, 100, 125, 150]);
        assert!(w.iter().all(|&(_, len)| len == 50));

        assert_eq!(segment_windows(50, 50, 25).unwrap(), vec![(0, 50)]);
        assert_eq!(segment_windows(60, 50, 25).unwrap(), vec![(0, 50), (10, 50)]);
        // short input clamps the window
        assert_eq!(segment_windows(3, 8, 4).unwrap(), vec![(0, 3)]);
    }

    #[test]
    fn window_sweep_matches_count_formula() {
        for t in 1..=64usize {
            for w in 1..=16usize {
                for s in 1..=16usize {
                    let windows = segment_windows(t, w, s).unwrap();
                    let we = w.min(t);
                    let regular = (t - we) / s + 1;
                    let tail = usize::from((regular - 1) * s + we < t);
                    assert_eq!(windows.len(), regular + tail, "t={t} w={w} s={s}");
                    // coverage: first window starts at 0, last ends at t
                    assert_eq!(windows[0].0, 0);
                    let (ls, ll) = *windows.last().unwrap();
                    assert_eq!(ls + ll, t.min(((windows.len() - 1 - tail) * s + we).max(ls + ll)));
                    assert!(ls + ll <= t);
                    if tail == 1 {
                        assert_eq!(ls + ll, t);
                    }
                }
            }
        }
    }

    fn eval_swasp(x: &Tensor, p: &SwaspParams) -> Vec<f64> {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new();
        let ids = p.bind(&mut tape, &mut binder, "sw");
        let xid = tape.constant(x.clone());
        let out = swasp(&mut tape, xid, &ids).unwrap();
        tape.data(out).to_vec()
    }

    #[test]
    fn swasp_shape_contract() {
        let mut r = rng(8);
        let c = 5;
        for (t, w, s) in [(1, 4, 2), (8, 4, 4), (20, 6, 3), (7, 10, 2)] {
            let p = SwaspParams::init(c, w, s, 2, 2, 6, false, &mut r);
            let x = random_matrix(c, t, &mut r);
            assert_eq!(eval_swasp(&x, &p).len(), c, "t={t} w={w} s={s}");
        }
    }

    fn permute_frames(x: &Tensor, perm: &[usize]) -> Tensor {
        let (c, t) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; c * t];
        for (new_t, &old_t) in perm.iter().enumerate() {
            for ch in 0..c {
                out[ch * t + new_t] = x.data()[ch * t + old_t];
            }
        }
        Tensor::new(vec![c, t], out).unwrap()
    }

    #[test]
    fn swasp_sees_cross_boundary_swaps_where_asp_does_not() {
        let mut r = rng(9);
        let c = 4;
        let t = 8;
        let x = random_matrix(c, t, &mut r);
        // windows are [0,4) and [4,8); swap the two frames on each side of
        // the boundary so both windows change content
        let cross: Vec<usize> = vec![0, 1, 4, 5, 2, 3, 6, 7];
        let crossed = permute_frames(&x, &cross);

        let sp = SwaspParams::init(c, 4, 4, 2, 2, 6, false, &mut r);
        let a = eval_swasp(&x, &sp);
        let b = eval_swasp(&crossed, &sp);
        let l2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        assert!(math::sqrt(l2) > 1e-6, "swasp blind to cross-boundary swap");

        // the same permutation is invisible to global ASP
        let ap = AttentionParams::init(c, c, 6, &mut r);
        let sa = attend_stats_eval(&x, &ap).unwrap();
        let sb = attend_stats_eval(&crossed, &ap).unwrap();
        for ch in 0..c {
            assert!((sa.mu[ch] - sb.mu[ch]).abs() < 1e-10);
            assert!((sa.sigma[ch] - sb.sigma[ch]).abs() < 1e-10);
        }
    }

    #[test]
    fn swasp_treats_whole_windows_as_exchangeable() {
        // swapping entire aligned windows only permutes the outer sequence,
        // and attentive stats are permutation invariant, so swasp is (near)
        // unchanged: windows are the unit of temporal structure
        let mut r = rng(19);
        let c = 4;
        let t = 8;
        let x = random_matrix(c, t, &mut r);
        let whole: Vec<usize> = vec![4, 5, 6, 7, 0, 1, 2, 3];
        let swapped = permute_frames(&x, &whole);
        let sp = SwaspParams::init(c, 4, 4, 2, 2, 6, false, &mut r);
        let a = eval_swasp(&x, &sp);
        let b = eval_swasp(&swapped, &sp);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn shared_outer_reuses_inner_parameters() {
        let mut r = rng(10);
        let c = 4;
        let p = SwaspParams::init(c, 3, 2, 1, 2, 4, true, &mut r);
        assert!(p.outer.is_none());
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new();
        let ids = p.bind(&mut tape, &mut binder, "sw");
        assert_eq!(ids.inner.proj, ids.outer.proj);
        assert_eq!(ids.inner.heads[0].wq, ids.outer.heads[0].wq);
        // and the fresh variant does not alias
        let pf = SwaspParams::init(c, 3, 2, 1, 2, 4, false, &mut r);
        let idf = pf.bind(&mut tape, &mut binder, "swf");
        assert_ne!(idf.inner.proj, idf.outer.proj);
    }

    #[test]
    fn kind_strings_round_trip() {
        for kind in [
            PoolingKind::Asp,
            PoolingKind::Mhasp,
            PoolingKind::Swasp,
            PoolingKind::AspSwasp,
            PoolingKind::MhaspSwasp,
            PoolingKind::AspMhaspSwasp,
        ] {
            assert_eq!(PoolingKind::parse(kind.as_str()).unwrap(), kind);
        }
        assert!(PoolingKind::parse("avg").is_err());
        let c = 10;
        assert_eq!(PoolingKind::Asp.out_dim(c), 20);
        assert_eq!(PoolingKind::Mhasp.out_dim(c), 10);
        assert_eq!(PoolingKind::AspSwasp.out_dim(c), 30);
        assert_eq!(PoolingKind::AspMhaspSwasp.out_dim(c), 40);
    }

    #[test]
    fn multiscale_widths_match_out_dim() {
        for c in [4usize, 96] {
            let mut r = rng(11 + c as u64);
            let cfg = PoolingConfig { window: 4, stride: 2, ..PoolingConfig::default() };
            let p = PoolingParams::init(c, &cfg, &mut r).unwrap();
            let mut tape = Tape::new();
            let mut binder = ParamBinder::new();
            let ids = p.bind(&mut tape, &mut binder, "pooling");
            let x = tape.constant(random_matrix(c, 10, &mut r));
            let out = multiscale_pool(&mut tape, x, &ids).unwrap();
            assert_eq!(tape.value(out).numel(), cfg.kind.out_dim(c));
            assert_eq!(cfg.kind.out_dim(c), 3 * c);
        }
    }

    #[test]
    fn gradient_reaches_both_branches() {
        let mut r = rng(12);
        let c = 4;
        let cfg = PoolingConfig { window: 3, stride: 2, heads: 1, d_k: Some(2), hidden: 4, ..PoolingConfig::default() };
        let p = PoolingParams::init(c, &cfg, &mut r).unwrap();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new();
        let ids = p.bind(&mut tape, &mut binder, "pooling");
        let x = tape.constant(random_matrix(c, 9, &mut r));
        let out = multiscale_pool(&mut tape, x, &ids).unwrap();
        let loss = tape.sum_all(out).unwrap();
        tape.backward(loss).unwrap();
        let grads = binder.grads(&tape);
        let nonzero = |name: &str| grads[name].iter().any(|g| g.abs() > 0.0);
        assert!(nonzero("pooling.asp.w2"), "asp branch got no gradient");
        assert!(nonzero("pooling.swasp.inner.proj"), "swasp inner got no gradient");
        assert!(nonzero("pooling.swasp.outer.proj"), "swasp outer got no gradient");
    }
}
