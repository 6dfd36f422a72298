//! Embedding fusion back-ends, trial construction, and trial scoring.
//!
//! Verification runs under the joint protocol: a trial is a target only when
//! enrollment and test share both the speaker and the pattern. Speaker and
//! text embeddings are length-normalized before any fusion so the additive,
//! multiplicative, and CNN back-ends see comparable inputs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::layers::{Conv1dIds, Conv1dLayer, Linear, LinearIds, ParamBinder};
use crate::math;
use crate::metrics::ScoreSet;
use crate::optim::{decayed_lr, AdamState, ParamSet};
use crate::rng::{epoch_rng, Prng};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub pattern_id: String,
    pub speaker_embedding: Vec<f64>,
    pub text_embedding: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn validate(&self) -> Result<()> {
        if self.speaker_embedding.is_empty() || self.text_embedding.is_empty() {
            return Err(Error::contract(format!("record {}: empty embedding", self.utterance_id)));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.speaker_embedding) || !finite(&self.text_embedding) {
            return Err(Error::contract(format!(
                "record {}: non-finite embedding",
                self.utterance_id
            )));
        }
        Ok(())
    }
}

/// `v / ||v||`; a zero (or numerically zero) vector is an error rather than
/// a silently propagated NaN.
pub fn length_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = math::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::contract("cannot length-normalize a zero vector"));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Inner product of the length-normalized inputs, in [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("cosine: {} vs {} dims", a.len(), b.len())));
    }
    let na = length_normalize(a)?;
    let nb = length_normalize(b)?;
    Ok(na.iter().zip(&nb).map(|(x, y)| x * y).sum())
}

fn fused_parts(r: &EmbeddingRecord) -> Result<(Vec<f64>, Vec<f64>)> {
    if r.speaker_embedding.len() != r.text_embedding.len() {
        return Err(Error::dim(format!(
            "record {}: speaker dim {} vs text dim {}",
            r.utterance_id,
            r.speaker_embedding.len(),
            r.text_embedding.len()
        )));
    }
    Ok((length_normalize(&r.speaker_embedding)?, length_normalize(&r.text_embedding)?))
}

/// Elementwise sum of the normalized speaker and text embeddings.
pub fn fuse_add(r: &EmbeddingRecord) -> Result<Vec<f64>> {
    let (s, t) = fused_parts(r)?;
    Ok(s.iter().zip(&t).map(|(a, b)| a + b).collect())
}

/// Hadamard product of the normalized speaker and text embeddings.
pub fn fuse_mul(r: &EmbeddingRecord) -> Result<Vec<f64>> {
    let (s, t) = fused_parts(r)?;
    Ok(s.iter().zip(&t).map(|(a, b)| a * b).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    SpeakerOnly,
    Add,
    Mul,
    Cnn,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "speaker-only" => Ok(Strategy::SpeakerOnly),
            "add" => Ok(Strategy::Add),
            "mul" => Ok(Strategy::Mul),
            "cnn" => Ok(Strategy::Cnn),
            other => Err(Error::contract(format!("unknown fusion strategy '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::SpeakerOnly => "speaker-only",
            Strategy::Add => "add",
            Strategy::Mul => "mul",
            Strategy::Cnn => "cnn",
        }
    }
}

// ---- trials ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceLabel {
    pub utterance_id: String,
    pub speaker_id: String,
    pub pattern_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub is_target: bool,
}

/// Requested trials per protocol cell. Only the first cell is a target under
/// the joint predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialCounts {
    pub same_spk_same_text: usize,
    pub same_spk_diff_text: usize,
    pub diff_spk_same_text: usize,
    pub diff_spk_diff_text: usize,
}

impl Default for TrialCounts {
    fn default() -> Self {
        TrialCounts {
            same_spk_same_text: 100,
            same_spk_diff_text: 100,
            diff_spk_same_text: 100,
            diff_spk_diff_text: 100,
        }
    }
}

impl TrialCounts {
    pub fn total(&self) -> usize {
        self.same_spk_same_text
            + self.same_spk_diff_text
            + self.diff_spk_same_text
            + self.diff_spk_diff_text
    }
}

/// Samples the four balanced cells of the joint protocol from the labeled
/// utterances. A cell the corpus cannot satisfy is an error naming the cell.
pub fn make_trials(labels: &[UtteranceLabel], counts: &TrialCounts, seed: u64) -> Result<Vec<Trial>> {
    if labels.is_empty() {
        return Err(Error::contract("make_trials: empty utterance list"));
    }
    let mut ids = BTreeMap::new();
    for l in labels {
        if ids.insert(l.utterance_id.as_str(), ()).is_some() {
            return Err(Error::contract(format!(
                "make_trials: duplicate utterance id {}",
                l.utterance_id
            )));
        }
    }
    let mut cells: [Vec<(usize, usize)>; 4] = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let same_spk = labels[i].speaker_id == labels[j].speaker_id;
            let same_text = labels[i].pattern_id == labels[j].pattern_id;
            let cell = match (same_spk, same_text) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            cells[cell].push((i, j));
        }
    }
    let wanted = [
        (counts.same_spk_same_text, "same-speaker same-text"),
        (counts.same_spk_diff_text, "same-speaker different-text"),
        (counts.diff_spk_same_text, "different-speaker same-text"),
        (counts.diff_spk_diff_text, "different-speaker different-text"),
    ];
    let mut out = Vec::with_capacity(counts.total());
    for (cell, (pairs, &(want, name))) in cells.iter().zip(wanted.iter()).enumerate() {
        if pairs.len() < want {
            return Err(Error::infeasible(format!(
                "make_trials: cell '{name}' has {} candidate pairs, {want} requested",
                pairs.len()
            )));
        }
        let mut pool = pairs.clone();
        let mut r = epoch_rng(seed, "trials", cell as u32);
        pool.shuffle(&mut r);
        for &(i, j) in pool.iter().take(want) {
            out.push(Trial {
                enroll: labels[i].utterance_id.clone(),
                test: labels[j].utterance_id.clone(),
                is_target: cell == 0,
            });
        }
    }
    Ok(out)
}

// ---- scoring ----

/// A scoring back-end; CNN fusion carries its trained model.
pub enum Scorer<'a> {
    SpeakerOnly,
    Add,
    Mul,
    Cnn(&'a CnnFusionModel),
}

fn record_map<'a>(records: &'a [EmbeddingRecord]) -> Result<BTreeMap<&'a str, &'a EmbeddingRecord>> {
    let mut map = BTreeMap::new();
    for r in records {
        r.validate()?;
        map.insert(r.utterance_id.as_str(), r);
    }
    Ok(map)
}

/// Scores every trial under the chosen back-end; scores align 1:1 with the
/// trial list.
pub fn score_trials(
    records: &[EmbeddingRecord],
    trials: &[Trial],
    scorer: &Scorer<'_>,
) -> Result<ScoreSet> {
    let map = record_map(records)?;
    let mut scores = Vec::with_capacity(trials.len());
    let mut labels = Vec::with_capacity(trials.len());
    for t in trials {
        let e = *map
            .get(t.enroll.as_str())
            .ok_or_else(|| Error::contract(format!("no embedding record for '{}'", t.enroll)))?;
        let s = *map
            .get(t.test.as_str())
            .ok_or_else(|| Error::contract(format!("no embedding record for '{}'", t.test)))?;
        let score = match scorer {
            Scorer::SpeakerOnly => cosine(&e.speaker_embedding, &s.speaker_embedding)?,
            Scorer::Add => cosine(&fuse_add(e)?, &fuse_add(s)?)?,
            Scorer::Mul => cosine(&fuse_mul(e)?, &fuse_mul(s)?)?,
            Scorer::Cnn(model) => model.score(e, s)?,
        };
        scores.push(score);
        labels.push(t.is_target);
    }
    ScoreSet::new(scores, labels)
}

// ---- CNN fusion ----

/// Discriminative trial scorer over the stacked `[4, D]` map of normalized
/// enrollment/test speaker and text embeddings: two same-padded conv blocks,
/// global average pooling, linear to one logit.
#[derive(Debug, Clone)]
pub struct CnnFusionModel {
    pub conv1: Conv1dLayer,
    pub conv2: Conv1dLayer,
    pub out: Linear,
}

pub struct CnnFusionIds {
    conv1: Conv1dIds,
    conv2: Conv1dIds,
    out: LinearIds,
}

impl CnnFusionModel {
    pub fn init(channels: usize, rng: &mut Prng) -> Result<Self> {
        if channels == 0 {
            return Err(Error::contract("cnn fusion: zero channels"));
        }
        Ok(CnnFusionModel {
            conv1: Conv1dLayer::init_same(4, channels, 3, 1, true, rng),
            conv2: Conv1dLayer::init_same(channels, channels, 3, 1, true, rng),
            out: Linear::init(channels, 1, true, rng),
        })
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut ParamBinder) -> CnnFusionIds {
        CnnFusionIds {
            conv1: self.conv1.bind(tape, binder, "conv1"),
            conv2: self.conv2.bind(tape, binder, "conv2"),
            out: self.out.bind(tape, binder, "out"),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.conv1.visit("conv1", f);
        self.conv2.visit("conv2", f);
        self.out.visit("out", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.conv1.visit_mut("conv1", f);
        self.conv2.visit_mut("conv2", f);
        self.out.visit_mut("out", f);
    }

    /// Trial score for one enroll/test record pair (the raw logit).
    pub fn score(&self, enroll: &EmbeddingRecord, test: &EmbeddingRecord) -> Result<f64> {
        let map = trial_map(enroll, test)?;
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new();
        let ids = self.bind(&mut tape, &mut binder);
        let x = tape.constant(map);
        let logit = cnn_logit(&mut tape, &ids, x)?;
        Ok(tape.data(logit)[0])
    }
}

impl ParamSet for CnnFusionModel {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.visit(f);
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_mut(f);
    }
}

/// `[4, D]` input map: normalized spk_e, txt_e, spk_t, txt_t rows.
fn trial_map(enroll: &EmbeddingRecord, test: &EmbeddingRecord) -> Result<Tensor> {
    let (se, te) = fused_parts(enroll)?;
    let (st, tt) = fused_parts(test)?;
    if se.len() != st.len() {
        return Err(Error::dim(format!(
            "cnn fusion: enroll dim {} vs test dim {}",
            se.len(),
            st.len()
        )));
    }
    let d = se.len();
    let mut data = Vec::with_capacity(4 * d);
    data.extend_from_slice(&se);
    data.extend_from_slice(&te);
    data.extend_from_slice(&st);
    data.extend_from_slice(&tt);
    Tensor::new(vec![4, d], data)
}

/// Logit for one `[4, D]` trial map under bound parameters.
pub fn cnn_logit(tape: &mut Tape, ids: &CnnFusionIds, x: TensorId) -> Result<TensorId> {
    let h = ids.conv1.forward(tape, x)?;
    let h = tape.relu(h)?;
    let h = ids.conv2.forward(tape, h)?;
    let h = tape.relu(h)?;
    let pooled = tape.mean_axis(h, 1)?;
    let row = {
        let c = tape.value(pooled).numel();
        tape.reshape(pooled, vec![1, c])?
    };
    ids.out.forward_rows(tape, row)
}

/// Binary cross-entropy with logits via two-class log-softmax: class 0 is
/// target, class 1 non-target.
pub fn bce_with_logits(tape: &mut Tape, logits: TensorId, targets: &[bool]) -> Result<TensorId> {
    let b = tape.value(logits).numel();
    let col = tape.reshape(logits, vec![b, 1])?;
    let zeros = tape.constant(Tensor::zeros(vec![b, 1]));
    let two = tape.concat(&[col, zeros], 1)?;
    let lsm = tape.log_softmax(two, 1)?;
    let classes: Vec<usize> = targets.iter().map(|&t| usize::from(!t)).collect();
    let picked = tape.pick_per_row(lsm, &classes)?;
    let mean = tape.mean_all(picked)?;
    tape.affine(mean, -1.0, 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnTrainConfig {
    pub channels: usize,
    pub epochs: u32,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
}

impl Default for CnnTrainConfig {
    fn default() -> Self {
        CnnTrainConfig { channels: 8, epochs: 10, batch_size: 32, base_lr: 0.003, seed: 0 }
    }
}

/// Trains the CNN back-end on labeled trials; returns the model and the
/// per-epoch mean loss.
pub fn train_cnn_fusion(
    records: &[EmbeddingRecord],
    trials: &[Trial],
    cfg: &CnnTrainConfig,
) -> Result<(CnnFusionModel, Vec<f64>)> {
    if trials.is_empty() {
        return Err(Error::contract("train_cnn_fusion: empty trial list"));
    }
    let n_targets = trials.iter().filter(|t| t.is_target).count();
    if n_targets == 0 || n_targets == trials.len() {
        return Err(Error::contract("train_cnn_fusion: trials must contain both classes"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::contract("train_cnn_fusion: zero batch size"));
    }
    let map = record_map(records)?;
    let mut maps = Vec::with_capacity(trials.len());
    for t in trials {
        let e = *map
            .get(t.enroll.as_str())
            .ok_or_else(|| Error::contract(format!("no embedding record for '{}'", t.enroll)))?;
        let s = *map
            .get(t.test.as_str())
            .ok_or_else(|| Error::contract(format!("no embedding record for '{}'", t.test)))?;
        maps.push((trial_map(e, s)?, t.is_target));
    }

    let mut init_rng = epoch_rng(cfg.seed, "cnn-init", 0);
    let mut model = CnnFusionModel::init(cfg.channels, &mut init_rng)?;
    let mut adam = AdamState::new();
    let mut losses = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 0..cfg.epochs {
        let lr = decayed_lr(cfg.base_lr, epoch);
        let mut order: Vec<usize> = (0..maps.len()).collect();
        let mut shuffle_rng = epoch_rng(cfg.seed, "cnn-shuffle", epoch);
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut binder = ParamBinder::new();
            let ids = model.bind(&mut tape, &mut binder);
            let mut logits = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let x = tape.constant(maps[i].0.clone());
                let l = cnn_logit(&mut tape, &ids, x)?;
                logits.push(tape.reshape(l, vec![1])?);
                labels.push(maps[i].1);
            }
            let cat = if logits.len() == 1 { logits[0] } else { tape.concat(&logits, 0)? };
            let loss = bce_with_logits(&mut tape, cat, &labels)?;
            total += tape.data(loss)[0] * chunk.len() as f64;
            count += chunk.len();
            tape.backward(loss)?;
            let grads = binder.grads(&tape);
            adam.step(&mut model, &grads, lr)?;
        }
        losses.push(total / count as f64);
    }
    Ok((model, losses))
}

/// Mean BCE of a model over labeled trials, without updates.
pub fn cnn_fusion_loss(
    model: &CnnFusionModel,
    records: &[EmbeddingRecord],
    trials: &[Trial],
) -> Result<f64> {
    let map = record_map(records)?;
    let mut tape = Tape::new();
    let mut binder = ParamBinder::new();
    let ids = model.bind(&mut tape, &mut binder);
    let mut logits = Vec::with_capacity(trials.len());
    let mut labels = Vec::with_capacity(trials.len());
    for t in trials {
        let e = *map
            .get(t.enroll.as_str())
            .ok_or_else(|| Error::contract(format!("no embedding record for '{}'", t.enroll)))?;
        let s = *map
            .get(t.test.as_str())
            .ok_or_else(|| Error::contract(format!("no embedding record for '{}'", t.test)))?;
        let x = tape.constant(trial_map(e, s)?);
        let l = cnn_logit(&mut tape, &ids, x)?;
        logits.push(tape.reshape(l, vec![1])?);
        labels.push(t.is_target);
    }
    let cat = if logits.len() == 1 { logits[0] } else { tape.concat(&logits, 0)? };
    let loss = bce_with_logits(&mut tape, cat, &labels)?;
    Ok(tape.data(loss)[0])
}
