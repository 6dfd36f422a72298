//! ECAPA-style speaker encoder, AAM-softmax loss, and the training loop.
//!
//! The trunk is a stem conv (kernel 5) into three residual dilated conv
//! blocks (kernel 3, dilations 2, 3, 4) whose outputs concatenate into a 1x1
//! MFA projection; every conv is same-padded so T survives unchanged. Frame
//! BatchNorm uses population statistics over the whole minibatch by
//! concatenating the per-utterance conv outputs along time before
//! normalizing, then slicing back, which matches per-(batch, time) BN on
//! equal-length crops without letting convolutions bleed across utterances.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{
    xavier_uniform, BatchNorm1d, BnAxis, BnIds, BnStats, Conv1dIds, Conv1dLayer, Linear, LinearIds,
    Mode, ParamBinder,
};
use crate::math;
use crate::optim::{decayed_lr, AdamState, ParamSet};
use crate::pooling::{multiscale_pool, PoolingConfig, PoolingIds, PoolingParams};
use crate::rng::{epoch_rng, Prng};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const BLOCK_DILATIONS: [usize; 3] = [2, 3, 4];

#[derive(Debug, Clone, PartialEq)]
pub struct EcapaLiteConfig {
    pub n_coeffs: usize,
    pub stem_channels: usize,
    /// MFA output channels C; the pooled vector has width `kind.out_dim(C)`.
    pub mfa_channels: usize,
    pub embed_dim: usize,
    pub pooling: PoolingConfig,
}

impl Default for EcapaLiteConfig {
    fn default() -> Self {
        EcapaLiteConfig {
            n_coeffs: 20,
            stem_channels: 48,
            mfa_channels: 96,
            embed_dim: 64,
            pooling: PoolingConfig::default(),
        }
    }
}

impl EcapaLiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_coeffs == 0 || self.stem_channels == 0 {
            return Err(Error::contract("ecapa: zero input or stem width"));
        }
        if self.mfa_channels % BLOCK_DILATIONS.len() != 0 {
            return Err(Error::contract(format!(
                "ecapa: MFA channels {} must divide by the {} blocks",
                self.mfa_channels,
                BLOCK_DILATIONS.len()
            )));
        }
        if self.embed_dim < 2 {
            return Err(Error::contract("ecapa: embedding dim must be >= 2"));
        }
        self.pooling.validate(self.mfa_channels)
    }

    pub fn pooled_dim(&self) -> usize {
        self.pooling.kind.out_dim(self.mfa_channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AamConfig {
    pub margin: f64,
    pub scale: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        AamConfig { margin: 0.2, scale: 30.0 }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..math::PI / 2.0).contains(&self.margin) {
            return Err(Error::contract("aam: margin must lie in [0, pi/2)"));
        }
        if self.scale <= 0.0 {
            return Err(Error::contract("aam: scale must be positive"));
        }
        Ok(())
    }
}

/// Rows rescaled to unit length (with a 1e-12 guard inside the square root).
pub fn normalize_rows(tape: &mut Tape, x: TensorId) -> Result<TensorId> {
    let (r, _c) = tape.value(x).dims2()?;
    let sq = tape.mul(x, x)?;
    let ss = tape.sum_axis(sq, 1)?;
    let ss = tape.affine(ss, 1.0, 1e-12)?;
    let norm = tape.sqrt(ss)?;
    let norm = tape.reshape(norm, vec![r, 1])?;
    tape.div(x, norm)
}

/// Additive-angular-margin softmax over cosine logits (ArcFace form).
///
/// The margin applies as `cos(theta + m)` while `theta + m <= pi`; past that
/// the standard linear fallback `cos(theta) - m sin(m)` keeps the penalty
/// monotone in m. The branch choice is made from forward values and enters
/// the graph as a constant mask.
pub fn aam_softmax_loss(
    tape: &mut Tape,
    embeddings: TensorId,
    labels: &[usize],
    weights: TensorId,
    cfg: &AamConfig,
) -> Result<TensorId> {
    cfg.validate()?;
    let (b, d) = tape.value(embeddings).dims2()?;
    let (k, dw) = tape.value(weights).dims2()?;
    if d != dw {
        return Err(Error::dim(format!("aam: embedding dim {d} vs weight dim {dw}")));
    }
    if labels.len() != b {
        return Err(Error::dim(format!("aam: {b} embeddings but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::vocab(format!("aam: class index {bad} out of range for {k} classes")));
    }
    let e = normalize_rows(tape, embeddings)?;
    let w = normalize_rows(tape, weights)?;
    let wt = tape.transpose(w)?;
    let cos = tape.matmul(e, wt)?;
    let cos_t = tape.pick_per_row(cos, labels)?;
    let c2 = tape.mul(cos_t, cos_t)?;
    let one_minus = tape.affine(c2, -1.0, 1.0)?;
    let clamped = tape.relu(one_minus)?;
    let clamped = tape.affine(clamped, 1.0, 1e-12)?;
    let sin_t = tape.sqrt(clamped)?;
    let cos_part = tape.affine(cos_t, math::cos(cfg.margin), 0.0)?;
    let sin_part = tape.affine(sin_t, math::sin(cfg.margin), 0.0)?;
    let phi = tape.sub(cos_part, sin_part)?;
    let fallback = tape.affine(cos_t, 1.0, -cfg.margin * math::sin(cfg.margin))?;
    // theta + m <= pi  <=>  cos(theta) > cos(pi - m)
    let boundary = -math::cos(cfg.margin);
    let mask_data: Vec<f64> =
        tape.data(cos_t).iter().map(|&c| if c > boundary { 1.0 } else { 0.0 }).collect();
    let mask = tape.constant(Tensor::new(vec![b], mask_data)?);
    let inv = tape.affine(mask, -1.0, 1.0)?;
    let sel_phi = tape.mul(mask, phi)?;
    let sel_fb = tape.mul(inv, fallback)?;
    let target_logit = tape.add(sel_phi, sel_fb)?;
    let delta = tape.sub(target_logit, cos_t)?;
    let delta = tape.reshape(delta, vec![b, 1])?;
    let mut onehot = vec![0.0; b * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let onehot = tape.constant(Tensor::new(vec![b, k], onehot)?);
    let scatter = tape.mul(onehot, delta)?;
    let modified = tape.add(cos, scatter)?;
    let scaled = tape.affine(modified, cfg.scale, 0.0)?;
    let lsm = tape.log_softmax(scaled, 1)?;
    let picked = tape.pick_per_row(lsm, labels)?;
    let mean = tape.mean_all(picked)?;
    tape.affine(mean, -1.0, 0.0)
}

// ---- model ----

#[derive(Debug, Clone)]
pub struct SpeakerModel {
    pub cfg: EcapaLiteConfig,
    pub stem: Conv1dLayer,
    pub stem_bn: BatchNorm1d,
    pub blocks: Vec<(Conv1dLayer, BatchNorm1d)>,
    pub mfa: Conv1dLayer,
    pub mfa_bn: BatchNorm1d,
    pub pooling: PoolingParams,
    pub head_bn: BatchNorm1d,
    pub head: Linear,
    /// AAM class weights, `[n_classes, D]`.
    pub aam_w: Tensor,
}

pub struct SpeakerIds {
    pub stem: Conv1dIds,
    pub stem_bn: BnIds,
    pub blocks: Vec<(Conv1dIds, BnIds)>,
    pub mfa: Conv1dIds,
    pub mfa_bn: BnIds,
    pub pooling: PoolingIds,
    pub head_bn: BnIds,
    pub head: LinearIds,
    pub aam_w: TensorId,
}

impl SpeakerModel {
    pub fn init(cfg: &EcapaLiteConfig, n_classes: usize, rng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        if n_classes < 2 {
            return Err(Error::contract("speaker model: need at least 2 classes"));
        }
        let s = cfg.stem_channels;
        let blocks = BLOCK_DILATIONS
            .iter()
            .map(|&d| {
                (
                    Conv1dLayer::init_same(s, s, 3, d, true, rng),
                    BatchNorm1d::new(s, BnAxis::Time),
                )
            })
            .collect();
        let pooled = cfg.pooled_dim();
        Ok(SpeakerModel {
            cfg: cfg.clone(),
            stem: Conv1dLayer::init_same(cfg.n_coeffs, s, 5, 1, true, rng),
            stem_bn: BatchNorm1d::new(s, BnAxis::Time),
            blocks,
            mfa: Conv1dLayer::init_same(BLOCK_DILATIONS.len() * s, cfg.mfa_channels, 1, 1, true, rng),
            mfa_bn: BatchNorm1d::new(cfg.mfa_channels, BnAxis::Time),
            pooling: PoolingParams::init(cfg.mfa_channels, &cfg.pooling, rng)?,
            head_bn: BatchNorm1d::new(pooled, BnAxis::Batch),
            head: Linear::init(pooled, cfg.embed_dim, true, rng),
            aam_w: xavier_uniform(vec![n_classes, cfg.embed_dim], cfg.embed_dim, n_classes, rng),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.aam_w.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut ParamBinder) -> SpeakerIds {
        SpeakerIds {
            stem: self.stem.bind(tape, binder, "stem"),
            stem_bn: self.stem_bn.bind(tape, binder, "stem_bn"),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, (c, bn))| {
                    (c.bind(tape, binder, &format!("block{i}")), bn.bind(tape, binder, &format!("block{i}_bn")))
                })
                .collect(),
            mfa: self.mfa.bind(tape, binder, "mfa"),
            mfa_bn: self.mfa_bn.bind(tape, binder, "mfa_bn"),
            pooling: self.pooling.bind(tape, binder, "pooling"),
            head_bn: self.head_bn.bind(tape, binder, "head_bn"),
            head: self.head.bind(tape, binder, "head"),
            aam_w: binder.bind(tape, String::from("aam.weight"), &self.aam_w),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.stem.visit("stem", f);
        self.stem_bn.visit("stem_bn", f);
        for (i, (c, bn)) in self.blocks.iter().enumerate() {
            c.visit(&format!("block{i}"), f);
            bn.visit(&format!("block{i}_bn"), f);
        }
        self.mfa.visit("mfa", f);
        self.mfa_bn.visit("mfa_bn", f);
        self.pooling.visit("pooling", f);
        self.head_bn.visit("head_bn", f);
        self.head.visit("head", f);
        f("aam.weight", &self.aam_w);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.stem.visit_mut("stem", f);
        self.stem_bn.visit_mut("stem_bn", f);
        for (i, (c, bn)) in self.blocks.iter_mut().enumerate() {
            c.visit_mut(&format!("block{i}"), f);
            bn.visit_mut(&format!("block{i}_bn"), f);
        }
        self.mfa.visit_mut("mfa", f);
        self.mfa_bn.visit_mut("mfa_bn", f);
        self.pooling.visit_mut("pooling", f);
        self.head_bn.visit_mut("head_bn", f);
        self.head.visit_mut("head", f);
        f("aam.weight", &mut self.aam_w);
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.stem_bn.visit_buffers("stem_bn", f);
        for (i, (_, bn)) in self.blocks.iter().enumerate() {
            bn.visit_buffers(&format!("block{i}_bn"), f);
        }
        self.mfa_bn.visit_buffers("mfa_bn", f);
        self.head_bn.visit_buffers("head_bn", f);
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.stem_bn.visit_buffers_mut("stem_bn", f);
        for i in 0..self.blocks.len() {
            let name = format!("block{i}_bn");
            self.blocks[i].1.visit_buffers_mut(&name, f);
        }
        self.mfa_bn.visit_buffers_mut("mfa_bn", f);
        self.head_bn.visit_buffers_mut("head_bn", f);
    }
}

impl ParamSet for SpeakerModel {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.visit(f);
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_mut(f);
    }
}

/// Runs one conv+relu site for every utterance, then normalizes all of them
/// with a single shared BatchNorm by concatenating along time.
fn conv_relu_bn_batch(
    tape: &mut Tape,
    conv: &Conv1dIds,
    bn: &BnIds,
    xs: &[TensorId],
    mode: Mode,
) -> Result<(Vec<TensorId>, Option<BnStats>)> {
    let mut outs = Vec::with_capacity(xs.len());
    let mut lens = Vec::with_capacity(xs.len());
    for &x in xs {
        let y = conv.forward(tape, x)?;
        let y = tape.relu(y)?;
        lens.push(tape.value(y).dims2()?.1);
        outs.push(y);
    }
    let joined = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    let (normed, stats) = bn.forward(tape, joined, mode)?;
    if outs.len() == 1 {
        return Ok((vec![normed], stats));
    }
    let mut split = Vec::with_capacity(outs.len());
    let mut at = 0;
    for len in lens {
        split.push(tape.slice(normed, 1, at, len)?);
        at += len;
    }
    Ok((split, stats))
}

/// Frame encoder over a batch of `[F, T_i]` inputs; returns per-utterance MFA
/// maps `[C, T_i]` plus the batch statistics of the five BN sites in order
/// stem, block0..2, mfa.
pub fn frame_encode_batch(
    tape: &mut Tape,
    ids: &SpeakerIds,
    xs: &[TensorId],
    mode: Mode,
) -> Result<(Vec<TensorId>, Vec<Option<BnStats>>)> {
    if xs.is_empty() {
        return Err(Error::contract("frame_encode: empty batch"));
    }
    let mut bn_stats = Vec::new();
    let (mut cur, s) = conv_relu_bn_batch(tape, &ids.stem, &ids.stem_bn, xs, mode)?;
    bn_stats.push(s);
    let mut block_outs: Vec<Vec<TensorId>> = Vec::with_capacity(ids.blocks.len());
    for (conv, bn) in &ids.blocks {
        let (ys, s) = conv_relu_bn_batch(tape, conv, bn, &cur, mode)?;
        bn_stats.push(s);
        let mut res = Vec::with_capacity(ys.len());
        for (&x, &y) in cur.iter().zip(&ys) {
            res.push(tape.add(x, y)?);
        }
        block_outs.push(res.clone());
        cur = res;
    }
    let mut cats = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let parts: Vec<TensorId> = block_outs.iter().map(|b| b[i]).collect();
        cats.push(tape.concat(&parts, 0)?);
    }
    let (ms, s) = conv_relu_bn_batch(tape, &ids.mfa, &ids.mfa_bn, &cats, mode)?;
    bn_stats.push(s);
    Ok((ms, bn_stats))
}

/// Pools each MFA map and applies the embedding head over the stacked batch.
/// Returns the `[B, D]` embeddings and the head BN statistics.
pub fn embed_batch(
    tape: &mut Tape,
    ids: &SpeakerIds,
    ms: &[TensorId],
    mode: Mode,
) -> Result<(TensorId, Option<BnStats>)> {
    let mut pooled = Vec::with_capacity(ms.len());
    for &m in ms {
        pooled.push(multiscale_pool(tape, m, &ids.pooling)?);
    }
    let stacked = tape.stack_rows(&pooled)?;
    let (normed, stats) = ids.head_bn.forward(tape, stacked, mode)?;
    let emb = ids.head.forward_rows(tape, normed)?;
    Ok((emb, stats))
}

/// Eval-mode MFA map of a single utterance.
pub fn frame_encode(model: &SpeakerModel, features: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new();
    let ids = model.bind(&mut tape, &mut binder);
    let x = tape.constant(features.clone());
    let (ms, _) = frame_encode_batch(&mut tape, &ids, &[x], Mode::Eval)?;
    Ok(tape.value(ms[0]).clone())
}

/// Eval-mode speaker embedding of a single `[F, T]` feature matrix. The
/// output is not length-normalized; scoring normalizes.
pub fn speaker_embed(model: &SpeakerModel, features: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new();
    let ids = model.bind(&mut tape, &mut binder);
    let x = tape.constant(features.clone());
    let (ms, _) = frame_encode_batch(&mut tape, &ids, &[x], Mode::Eval)?;
    let (emb, _) = embed_batch(&mut tape, &ids, &ms, Mode::Eval)?;
    Ok(tape.data(emb).to_vec())
}

/// Pool + head on a prebuilt MFA map (eval mode).
pub fn embed_from_frames(model: &SpeakerModel, m: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new();
    let ids = model.bind(&mut tape, &mut binder);
    let mid = tape.constant(m.clone());
    let (emb, _) = embed_batch(&mut tape, &ids, &[mid], Mode::Eval)?;
    Ok(tape.data(emb).to_vec())
}

// ---- training ----

#[derive(Debug, Clone)]
pub struct SpeakerTrainItem {
    /// `[F, T]` features, channel rows.
    pub features: Tensor,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerTrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Random contiguous crop length during training; full length at eval.
    pub crop_frames: usize,
    pub seed: u64,
    pub aam: AamConfig,
}

impl Default for SpeakerTrainConfig {
    fn default() -> Self {
        SpeakerTrainConfig {
            epochs: 8,
            batch_size: 16,
            base_lr: 0.001,
            crop_frames: 120,
            seed: 0,
            aam: AamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: u32,
    pub lr: f64,
    pub loss: f64,
}

fn crop(features: &Tensor, crop_frames: usize, rng: &mut Prng) -> Result<Tensor> {
    let (f, t) = features.dims2()?;
    if t <= crop_frames {
        return Ok(features.clone());
    }
    let start = rng.random_range(0..=t - crop_frames);
    let mut data = Vec::with_capacity(f * crop_frames);
    for ch in 0..f {
        data.extend_from_slice(&features.data()[ch * t + start..ch * t + start + crop_frames]);
    }
    Tensor::new(vec![f, crop_frames], data)
}

fn validate_items(model: &SpeakerModel, items: &[SpeakerTrainItem]) -> Result<()> {
    if items.is_empty() {
        return Err(Error::contract("train_speaker: empty corpus"));
    }
    let k = model.n_classes();
    let mut seen = vec![false; k];
    for it in items {
        if it.class >= k {
            return Err(Error::vocab(format!("train_speaker: class {} out of range {k}", it.class)));
        }
        seen[it.class] = true;
        let (f, _) = it.features.dims2()?;
        if f != model.cfg.n_coeffs {
            return Err(Error::dim(format!(
                "train_speaker: features have {f} rows, model expects {}",
                model.cfg.n_coeffs
            )));
        }
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::contract("train_speaker: need at least 2 distinct classes"));
    }
    Ok(())
}

/// One forward/backward/step over a prepared batch; returns the batch loss.
fn speaker_train_step(
    model: &mut SpeakerModel,
    adam: &mut AdamState,
    batch: &[(Tensor, usize)],
    aam: &AamConfig,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new();
    let ids = model.bind(&mut tape, &mut binder);
    let xs: Vec<TensorId> = batch.iter().map(|(f, _)| tape.constant(f.clone())).collect();
    let labels: Vec<usize> = batch.iter().map(|&(_, c)| c).collect();
    let (ms, frame_stats) = frame_encode_batch(&mut tape, &ids, &xs, Mode::Train)?;
    let (emb, head_stats) = embed_batch(&mut tape, &ids, &ms, Mode::Train)?;
    let loss = aam_softmax_loss(&mut tape, emb, &labels, ids.aam_w, aam)?;
    let loss_value = tape.data(loss)[0];
    tape.backward(loss)?;
    let grads = binder.grads(&tape);
    adam.step(model, &grads, lr)?;
    let mut stats = frame_stats.into_iter();
    if let Some(Some(s)) = stats.next() {
        model.stem_bn.update_running(&s);
    }
    for i in 0..model.blocks.len() {
        if let Some(Some(s)) = stats.next() {
            model.blocks[i].1.update_running(&s);
        }
    }
    if let Some(Some(s)) = stats.next() {
        model.mfa_bn.update_running(&s);
    }
    if let Some(s) = head_stats {
        model.head_bn.update_running(&s);
    }
    Ok(loss_value)
}

/// Mean train-mode loss over the full item list without updating anything;
/// crops are drawn from the given epoch's stream so before/after comparisons
/// see the same data.
pub fn speaker_dataset_loss(
    model: &SpeakerModel,
    items: &[SpeakerTrainItem],
    cfg: &SpeakerTrainConfig,
    epoch: u32,
) -> Result<f64> {
    validate_items(model, items)?;
    let mut crop_rng = epoch_rng(cfg.seed, "speaker-crop", epoch);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in items.chunks(cfg.batch_size.max(1)) {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new();
        let ids = model.bind(&mut tape, &mut binder);
        let mut xs = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        for it in chunk {
            let c = crop(&it.features, cfg.crop_frames, &mut crop_rng)?;
            xs.push(tape.constant(c));
            labels.push(it.class);
        }
        let (ms, _) = frame_encode_batch(&mut tape, &ids, &xs, Mode::Train)?;
        let (emb, _) = embed_batch(&mut tape, &ids, &ms, Mode::Train)?;
        let loss = aam_softmax_loss(&mut tape, emb, &labels, ids.aam_w, &cfg.aam)?;
        total += tape.data(loss)[0] * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

/// Trains epochs `start_epoch..cfg.epochs`. All randomness derives from
/// `(seed, epoch)`, so resuming from a checkpoint at any epoch boundary
/// reproduces an uninterrupted run bit-exactly.
pub fn train_speaker(
    model: &mut SpeakerModel,
    adam: &mut AdamState,
    items: &[SpeakerTrainItem],
    cfg: &SpeakerTrainConfig,
    start_epoch: u32,
) -> Result<Vec<EpochLog>> {
    validate_items(model, items)?;
    cfg.aam.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::contract("train_speaker: zero batch size"));
    }
    let mut logs = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let lr = decayed_lr(cfg.base_lr, epoch);
        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut shuffle_rng = epoch_rng(cfg.seed, "speaker-shuffle", epoch);
        order.shuffle(&mut shuffle_rng);
        let mut crop_rng = epoch_rng(cfg.seed, "speaker-crop", epoch);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Result<Vec<(Tensor, usize)>> = chunk
                .iter()
                .map(|&i| Ok((crop(&items[i].features, cfg.crop_frames, &mut crop_rng)?, items[i].class)))
                .collect();
            let loss = speaker_train_step(model, adam, &batch?, &cfg.aam, lr)?;
            total += loss * chunk.len() as f64;
            count += chunk.len();
        }
        logs.push(EpochLog { epoch, lr, loss: total / count as f64 });
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pooling::PoolingKind;
    use crate::rng::stream;

    fn tiny_config() -> EcapaLiteConfig {
        EcapaLiteConfig {
            n_coeffs: 6,
            stem_channels: 8,
            mfa_channels: 12,
            embed_dim: 8,
            pooling: PoolingConfig {
                kind: PoolingKind::Asp,
                window: 8,
                stride: 4,
                heads: 1,
                d_k: Some(4),
                hidden: 4,
                share_outer: false,
            },
        }
    }

    fn random_features(f: usize, t: usize, rng: &mut Prng) -> Tensor {
        let data: Vec<f64> = (0..f * t).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![f, t], data).unwrap()
    }

    fn toy_items(cfg: &EcapaLiteConfig, classes: usize, per_class: usize, t: usize, seed: u64) -> Vec<SpeakerTrainItem> {
        let mut r = stream(seed, "toy-items");
        let mut items = Vec::new();
        for class in 0..classes {
            // give each class a distinct constant offset so it is learnable
            for _ in 0..per_class {
                let mut feats = random_features(cfg.n_coeffs, t, &mut r);
                for v in feats.data_mut().iter_mut() {
                    *v += class as f64 * 0.8;
                }
                items.push(SpeakerTrainItem { features: feats, class });
            }
        }
        items
    }

    #[test]
    fn margin_free_aam_is_cross_entropy_over_cosines() {
        let mut r = stream(1, "aam-ce");
        let (b, d, k) = (4, 6, 5);
        let emb = random_features(b, d, &mut r).with_grad();
        let w = random_features(k, d, &mut r).with_grad();
        let labels = [0usize, 2, 4, 1];

        // reference: plain CE over cosine logits, scalar arithmetic
        let mut expected = 0.0;
        for i in 0..b {
            let e = &emb.data()[i * d..(i + 1) * d];
            let en: f64 = math::sqrt(e.iter().map(|v| v * v).sum::<f64>() + 1e-12);
            let logits: Vec<f64> = (0..k)
                .map(|c| {
                    let wr = &w.data()[c * d..(c + 1) * d];
                    let wn: f64 = math::sqrt(wr.iter().map(|v| v * v).sum::<f64>() + 1e-12);
                    e.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>() / (en * wn)
                })
                .collect();
            let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + math::ln(logits.iter().map(|&l| math::exp(l - m)).sum::<f64>());
            expected += lse - logits[labels[i]];
        }
        expected /= b as f64;

        let mut tape = Tape::new();
        let e = tape.leaf(emb);
        let wid = tape.leaf(w);
        let cfg = AamConfig { margin: 0.0, scale: 1.0 };
        let loss = aam_softmax_loss(&mut tape, e, &labels, wid, &cfg).unwrap();
        assert!((tape.data(loss)[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn loss_is_monotone_in_margin() {
        let mut r = stream(2, "aam-mono");
        let (b, d, k) = (6, 5, 4);
        let mut emb = random_features(b, d, &mut r);
        let w = random_features(k, d, &mut r);
        // force one example to theta = pi so the fallback branch is exercised
        let wrow: Vec<f64> = w.data()[0..d].to_vec();
        for (i, v) in wrow.iter().enumerate() {
            emb.data_mut()[i] = -v;
        }
        let labels: Vec<usize> = (0..b).map(|i| i % k).collect();
        let mut prev = f64::NEG_INFINITY;
        for m in [0.0, 0.1, 0.2, 0.3] {
            let mut tape = Tape::new();
            let e = tape.leaf(emb.clone().with_grad());
            let wid = tape.leaf(w.clone().with_grad());
            let loss =
                aam_softmax_loss(&mut tape, e, &labels, wid, &AamConfig { margin: m, scale: 30.0 }).unwrap();
            let v = tape.data(loss)[0];
            assert!(v >= prev - 1e-12, "loss decreased from {prev} to {v} at margin {m}");
            prev = v;
        }
    }

    #[test]
    fn aam_rejects_bad_labels() {
        let mut r = stream(3, "aam-bad");
        let mut tape = Tape::new();
        let e = tape.leaf(random_features(2, 4, &mut r).with_grad());
        let w = tape.leaf(random_features(3, 4, &mut r).with_grad());
        let err = aam_softmax_loss(&mut tape, e, &[0, 3], w, &AamConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn frame_encode_preserves_time() {
        let mut r = stream(4, "shape");
        let cfg = tiny_config();
        let model = SpeakerModel::init(&cfg, 3, &mut r).unwrap();
        for t in [1usize, 98, 200] {
            let x = random_features(cfg.n_coeffs, t, &mut r);
            let m = frame_encode(&model, &x).unwrap();
            assert_eq!(m.shape(), &[cfg.mfa_channels, t]);
        }
    }

    #[test]
    fn zeroed_blocks_pass_input_through() {
        let mut r = stream(5, "resid");
        let cfg = tiny_config();
        let mut model = SpeakerModel::init(&cfg, 3, &mut r).unwrap();
        for (conv, _) in &mut model.blocks {
            for v in conv.w.data_mut().iter_mut() {
                *v = 0.0;
            }
            if let Some(b) = &mut conv.b {
                for v in b.data_mut().iter_mut() {
                    *v = 0.0;
                }
            }
        }
        let x = random_features(cfg.n_coeffs, 12, &mut r);
        // with zero block weights each residual block is the identity, so all
        // three MFA inputs equal the stem output
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new();
        let ids = model.bind(&mut tape, &mut binder);
        let xid = tape.constant(x.clone());
        let (stem_out, _) = conv_relu_bn_batch(&mut tape, &ids.stem, &ids.stem_bn, &[xid], Mode::Eval).unwrap();
        let cat = tape.concat(&[stem_out[0], stem_out[0], stem_out[0]], 0).unwrap();
        let (expect, _) = conv_relu_bn_batch(&mut tape, &ids.mfa, &ids.mfa_bn, &[cat], Mode::Eval).unwrap();
        let got = frame_encode(&model, &x).unwrap();
        for (a, b) in got.data().iter().zip(tape.data(expect[0])) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn embeddings_are_deterministic_and_finite() {
        let mut r = stream(6, "embed");
        let cfg = tiny_config();
        let model = SpeakerModel::init(&cfg, 3, &mut r).unwrap();
        let x = random_features(cfg.n_coeffs, 40, &mut r);
        let a = speaker_embed(&model, &x).unwrap();
        let b = speaker_embed(&model, &x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), cfg.embed_dim);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn asp_embedding_ignores_frame_order_swasp_does_not() {
        let mut r = stream(7, "perm");
        let mut cfg = tiny_config();
        let model = SpeakerModel::init(&cfg, 3, &mut r).unwrap();
        let c = cfg.mfa_channels;
        let t = 16;
        let m = random_features(c, t, &mut r);
        // moves frames 2,3 into the second window and 4,5 into the first, so
        // both windows change contents; no window keeps its frame multiset
        let perm: Vec<usize> =
            [0usize, 1, 4, 5, 2, 3, 6, 7].iter().copied().chain(8..t).collect();
        let mut perm_data = vec![0.0; c * t];
        for ch in 0..c {
            for (i, &p) in perm.iter().enumerate() {
                perm_data[ch * t + i] = m.data()[ch * t + p];
            }
        }
        let permuted = Tensor::new(vec![c, t], perm_data).unwrap();
        let a = embed_from_frames(&model, &m).unwrap();
        let b = embed_from_frames(&model, &permuted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-8, "asp embedding not order-invariant");
        }

        cfg.pooling.kind = PoolingKind::AspSwasp;
        cfg.pooling.window = 4;
        cfg.pooling.stride = 4;
        let model2 = SpeakerModel::init(&cfg, 3, &mut r).unwrap();
        let a2 = embed_from_frames(&model2, &m).unwrap();
        let b2 = embed_from_frames(&model2, &permuted).unwrap();
        let l2: f64 = a2.iter().zip(&b2).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(math::sqrt(l2) > 1e-6, "asp+swasp embedding blind to frame order");
    }

    #[test]
    fn one_epoch_reduces_toy_loss() {
        let cfg = tiny_config();
        let mut wins = 0;
        for seed in 0..3u64 {
            let mut r = stream(seed, "toy-train");
            let mut model = SpeakerModel::init(&cfg, 2, &mut r).unwrap();
            let items = toy_items(&cfg, 2, 8, 24, seed);
            let tcfg = SpeakerTrainConfig {
                epochs: 1,
                batch_size: 4,
                base_lr: 0.01,
                crop_frames: 24,
                seed,
                ..SpeakerTrainConfig::default()
            };
            let before = speaker_dataset_loss(&model, &items, &tcfg, 0).unwrap();
            let mut adam = AdamState::new();
            train_speaker(&mut model, &mut adam, &items, &tcfg, 0).unwrap();
            let after = speaker_dataset_loss(&model, &items, &tcfg, 0).unwrap();
            if after < before {
                wins += 1;
            }
        }
        assert!(wins >= 2, "loss decreased in only {wins}/3 seeds");
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let cfg = tiny_config();
        let items = toy_items(&cfg, 2, 3, 20, 9);
        let tcfg = SpeakerTrainConfig {
            epochs: 2,
            batch_size: 3,
            crop_frames: 16,
            seed: 5,
            ..SpeakerTrainConfig::default()
        };

        let mut r1 = stream(11, "det");
        let mut m1 = SpeakerModel::init(&cfg, 2, &mut r1).unwrap();
        let mut a1 = AdamState::new();
        let log1 = train_speaker(&mut m1, &mut a1, &items, &tcfg, 0).unwrap();

        // identical straight run
        let mut r2 = stream(11, "det");
        let mut m2 = SpeakerModel::init(&cfg, 2, &mut r2).unwrap();
        let mut a2 = AdamState::new();
        let log2 = train_speaker(&mut m2, &mut a2, &items, &tcfg, 0).unwrap();
        assert_eq!(log1, log2);

        // resumed run: epoch 0, checkpoint boundary, epoch 1
        let mut r3 = stream(11, "det");
        let mut m3 = SpeakerModel::init(&cfg, 2, &mut r3).unwrap();
        let mut a3 = AdamState::new();
        let mut cfg1 = tcfg.clone();
        cfg1.epochs = 1;
        let mut log3 = train_speaker(&mut m3, &mut a3, &items, &cfg1, 0).unwrap();
        log3.extend(train_speaker(&mut m3, &mut a3, &items, &tcfg, 1).unwrap());
        assert_eq!(log1, log3);

        let mut mismatch = false;
        m1.visit(&mut |name, t| {
            let mut other: Option<Vec<f64>> = None;
            m3.visit(&mut |n2, t2| {
                if n2 == name {
                    other = Some(t2.data().to_vec());
                }
            });
            if other.as_deref() != Some(t.data()) {
                mismatch = true;
            }
        });
        assert!(!mismatch, "resumed parameters diverge from straight run");
    }

    #[test]
    fn lr_schedule_is_exponential() {
        let cfg = tiny_config();
        let items = toy_items(&cfg, 2, 2, 16, 3);
        let tcfg = SpeakerTrainConfig {
            epochs: 3,
            batch_size: 4,
            crop_frames: 16,
            seed: 1,
            ..SpeakerTrainConfig::default()
        };
        let mut r = stream(12, "lr");
        let mut model = SpeakerModel::init(&cfg, 2, &mut r).unwrap();
        let mut adam = AdamState::new();
        let logs = train_speaker(&mut model, &mut adam, &items, &tcfg, 0).unwrap();
        assert_eq!(logs.len(), 3);
        for log in &logs {
            assert_eq!(log.lr, 0.001 * math::powf(0.97, log.epoch as f64));
        }
    }

    #[test]
    fn grads_cover_every_parameter() {
        let mut r = stream(13, "cover");
        let cfg = tiny_config();
        let model = SpeakerModel::init(&cfg, 2, &mut r).unwrap();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new();
        let ids = model.bind(&mut tape, &mut binder);
        let x0 = tape.constant(random_features(cfg.n_coeffs, 12, &mut r));
        let x1 = tape.constant(random_features(cfg.n_coeffs, 12, &mut r));
        let (ms, _) = frame_encode_batch(&mut tape, &ids, &[x0, x1], Mode::Train).unwrap();
        let (emb, _) = embed_batch(&mut tape, &ids, &ms, Mode::Train).unwrap();
        let loss = aam_softmax_loss(&mut tape, emb, &[0, 1], ids.aam_w, &AamConfig::default()).unwrap();
        tape.backward(loss).unwrap();
        let grads = binder.grads(&tape);
        let names = model.param_names();
        assert_eq!(grads.len(), names.len());
        for n in names {
            assert!(grads.contains_key(n.as_str()), "missing grad entry for {n}");
        }
    }
}
