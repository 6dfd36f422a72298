//! JSON checkpoints for the three trainable models.
//!
//! A checkpoint is self-contained: model hyperparameters, every parameter
//! tensor by name, BatchNorm running buffers, the Adam moment state, and the
//! trainer cursor (`next_epoch`). Loading rebuilds the exact training state,
//! so a resumed run is bit-identical to an uninterrupted one.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use digitsv_core::fusion::CnnFusionModel;
use digitsv_core::optim::AdamState;
use digitsv_core::rng::stream;
use digitsv_core::speaker::{AamConfig, EcapaLiteConfig, SpeakerModel, SpeakerTrainConfig};
use digitsv_core::text::{TextTrainConfig, TransformerConfig, TripleLossWeights};
use digitsv_core::text::TextModel;
use digitsv_core::tensor::Tensor;

use crate::config::{PatternSection, PoolingSection};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorBlob {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerBlob {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerBlob {
    fn from_state(s: &AdamState) -> Self {
        OptimizerBlob {
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
            t: s.t,
            m: s.m.clone(),
            v: s.v.clone(),
        }
    }

    fn into_state(self) -> AdamState {
        AdamState { beta1: self.beta1, beta2: self.beta2, eps: self.eps, t: self.t, m: self.m, v: self.v }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeakerTrainSpec {
    pub epochs: u32,
    pub batch_size: usize,
    pub base_lr: f64,
    pub crop_frames: usize,
    pub seed: u64,
    pub aam_margin: f64,
    pub aam_scale: f64,
}

impl SpeakerTrainSpec {
    pub fn from_core(c: &SpeakerTrainConfig) -> Self {
        SpeakerTrainSpec {
            epochs: c.epochs,
            batch_size: c.batch_size,
            base_lr: c.base_lr,
            crop_frames: c.crop_frames,
            seed: c.seed,
            aam_margin: c.aam.margin,
            aam_scale: c.aam.scale,
        }
    }

    pub fn to_core(&self) -> SpeakerTrainConfig {
        SpeakerTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            crop_frames: self.crop_frames,
            seed: self.seed,
            aam: AamConfig { margin: self.aam_margin, scale: self.aam_scale },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeakerCheckpoint {
    /// Speaker ids in class-index order.
    pub speakers: Vec<String>,
    pub n_coeffs: usize,
    pub stem_channels: usize,
    pub mfa_channels: usize,
    pub embed_dim: usize,
    pub pooling: PoolingSection,
    pub train: SpeakerTrainSpec,
    pub next_epoch: u32,
    pub params: BTreeMap<String, TensorBlob>,
    pub buffers: BTreeMap<String, Vec<f64>>,
    pub optimizer: OptimizerBlob,
}

pub fn save_speaker(
    path: &Path,
    model: &SpeakerModel,
    speakers: &[String],
    adam: &AdamState,
    train: &SpeakerTrainConfig,
    next_epoch: u32,
) -> Result<()> {
    let cfg = &model.cfg;
    let ckpt = SpeakerCheckpoint {
        speakers: speakers.to_vec(),
        n_coeffs: cfg.n_coeffs,
        stem_channels: cfg.stem_channels,
        mfa_channels: cfg.mfa_channels,
        embed_dim: cfg.embed_dim,
        pooling: PoolingSection::from_core(&cfg.pooling),
        train: SpeakerTrainSpec::from_core(train),
        next_epoch,
        params: collect_params(|f| model.visit(f)),
        buffers: collect_buffers(|f| model.visit_buffers(f)),
        optimizer: OptimizerBlob::from_state(adam),
    };
    write_json(path, &ckpt)
}

pub struct LoadedSpeaker {
    pub model: SpeakerModel,
    pub speakers: Vec<String>,
    pub adam: AdamState,
    pub train: SpeakerTrainConfig,
    pub next_epoch: u32,
}

pub fn load_speaker(path: &Path) -> Result<LoadedSpeaker> {
    let ckpt: SpeakerCheckpoint = read_json(path)?;
    let cfg = EcapaLiteConfig {
        n_coeffs: ckpt.n_coeffs,
        stem_channels: ckpt.stem_channels,
        mfa_channels: ckpt.mfa_channels,
        embed_dim: ckpt.embed_dim,
        pooling: ckpt.pooling.to_core()?,
    };
    if ckpt.speakers.len() < 2 {
        bail!("{}: speaker checkpoint lists {} speakers", path.display(), ckpt.speakers.len());
    }
    let mut init_rng = stream(0, "ckpt-restore");
    let mut model = SpeakerModel::init(&cfg, ckpt.speakers.len(), &mut init_rng)
        .map_err(anyhow::Error::msg)?;
    restore_params(path, &ckpt.params, |f| model.visit_mut(f))?;
    restore_buffers(path, &ckpt.buffers, |f| model.visit_buffers_mut(f))?;
    Ok(LoadedSpeaker {
        model,
        speakers: ckpt.speakers,
        adam: ckpt.optimizer.into_state(),
        train: ckpt.train.to_core(),
        next_epoch: ckpt.next_epoch,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextTrainSpec {
    pub epochs: u32,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl TextTrainSpec {
    pub fn from_core(c: &TextTrainConfig) -> Self {
        TextTrainSpec {
            epochs: c.epochs,
            batch_size: c.batch_size,
            base_lr: c.base_lr,
            seed: c.seed,
            alpha: c.weights.alpha,
            beta: c.weights.beta,
            gamma: c.weights.gamma,
        }
    }

    pub fn to_core(&self) -> TextTrainConfig {
        TextTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            seed: self.seed,
            weights: TripleLossWeights { alpha: self.alpha, beta: self.beta, gamma: self.gamma },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextCheckpoint {
    /// Patterns in class-index order, with their token strings.
    pub patterns: Vec<PatternSection>,
    pub n_coeffs: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_qkv: Option<usize>,
    pub d_ff: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub conv_channels: usize,
    pub hidden: usize,
    pub text_embed_dim: usize,
    pub train: TextTrainSpec,
    pub next_epoch: u32,
    pub params: BTreeMap<String, TensorBlob>,
    pub buffers: BTreeMap<String, Vec<f64>>,
    pub optimizer: OptimizerBlob,
}

pub fn save_text(
    path: &Path,
    model: &TextModel,
    patterns: &[PatternSection],
    adam: &AdamState,
    train: &TextTrainConfig,
    next_epoch: u32,
) -> Result<()> {
    let cfg = &model.cfg;
    if patterns.len() != cfg.n_patterns {
        bail!("{} patterns for a model with {} classes", patterns.len(), cfg.n_patterns);
    }
    let ckpt = TextCheckpoint {
        patterns: patterns.to_vec(),
        n_coeffs: cfg.n_coeffs,
        d_model: cfg.d_model,
        heads: cfg.heads,
        d_qkv: cfg.d_qkv,
        d_ff: cfg.d_ff,
        encoder_blocks: cfg.encoder_blocks,
        decoder_blocks: cfg.decoder_blocks,
        conv_channels: cfg.conv_channels,
        hidden: cfg.hidden,
        text_embed_dim: cfg.text_embed_dim,
        train: TextTrainSpec::from_core(train),
        next_epoch,
        params: collect_params(|f| model.visit(f)),
        buffers: collect_buffers(|f| model.visit_buffers(f)),
        optimizer: OptimizerBlob::from_state(adam),
    };
    write_json(path, &ckpt)
}

pub struct LoadedText {
    pub model: TextModel,
    pub patterns: Vec<PatternSection>,
    pub adam: AdamState,
    pub train: TextTrainConfig,
    pub next_epoch: u32,
}

pub fn load_text(path: &Path) -> Result<LoadedText> {
    let ckpt: TextCheckpoint = read_json(path)?;
    let cfg = TransformerConfig {
        n_coeffs: ckpt.n_coeffs,
        d_model: ckpt.d_model,
        heads: ckpt.heads,
        d_qkv: ckpt.d_qkv,
        d_ff: ckpt.d_ff,
        encoder_blocks: ckpt.encoder_blocks,
        decoder_blocks: ckpt.decoder_blocks,
        conv_channels: ckpt.conv_channels,
        hidden: ckpt.hidden,
        text_embed_dim: ckpt.text_embed_dim,
        n_patterns: ckpt.patterns.len(),
    };
    let mut init_rng = stream(0, "ckpt-restore");
    let mut model = TextModel::init(&cfg, &mut init_rng).map_err(anyhow::Error::msg)?;
    restore_params(path, &ckpt.params, |f| model.visit_mut(f))?;
    restore_buffers(path, &ckpt.buffers, |f| model.visit_buffers_mut(f))?;
    Ok(LoadedText {
        model,
        patterns: ckpt.patterns,
        adam: ckpt.optimizer.into_state(),
        train: ckpt.train.to_core(),
        next_epoch: ckpt.next_epoch,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionCheckpoint {
    pub channels: usize,
    pub params: BTreeMap<String, TensorBlob>,
}

pub fn save_fusion(path: &Path, model: &CnnFusionModel, channels: usize) -> Result<()> {
    let ckpt = FusionCheckpoint { channels, params: collect_params(|f| model.visit(f)) };
    write_json(path, &ckpt)
}

pub fn load_fusion(path: &Path) -> Result<CnnFusionModel> {
    let ckpt: FusionCheckpoint = read_json(path)?;
    let mut init_rng = stream(0, "ckpt-restore");
    let mut model =
        CnnFusionModel::init(ckpt.channels, &mut init_rng).map_err(anyhow::Error::msg)?;
    restore_params(path, &ckpt.params, |f| model.visit_mut(f))?;
    Ok(model)
}

// ---- shared plumbing ----

fn collect_params(visit: impl FnOnce(&mut dyn FnMut(&str, &Tensor))) -> BTreeMap<String, TensorBlob> {
    let mut out = BTreeMap::new();
    visit(&mut |name, t| {
        out.insert(
            name.to_string(),
            TensorBlob { shape: t.shape().to_vec(), data: t.data().to_vec() },
        );
    });
    out
}

fn collect_buffers(visit: impl FnOnce(&mut dyn FnMut(&str, &[f64]))) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    visit(&mut |name, b| {
        out.insert(name.to_string(), b.to_vec());
    });
    out
}

fn restore_params(
    path: &Path,
    blobs: &BTreeMap<String, TensorBlob>,
    visit_mut: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor)),
) -> Result<()> {
    let mut missing = Vec::new();
    let mut bad_shape = Vec::new();
    let mut seen = 0usize;
    visit_mut(&mut |name, t| {
        seen += 1;
        match blobs.get(name) {
            Some(b) if b.shape == t.shape() => t.data_mut().copy_from_slice(&b.data),
            Some(_) => bad_shape.push(name.to_string()),
            None => missing.push(name.to_string()),
        }
    });
    if !missing.is_empty() {
        bail!("{}: checkpoint is missing parameters {missing:?}", path.display());
    }
    if !bad_shape.is_empty() {
        bail!("{}: checkpoint shape mismatch for {bad_shape:?}", path.display());
    }
    if seen != blobs.len() {
        bail!("{}: checkpoint has {} parameters, model has {seen}", path.display(), blobs.len());
    }
    Ok(())
}

fn restore_buffers(
    path: &Path,
    blobs: &BTreeMap<String, Vec<f64>>,
    visit_mut: impl FnOnce(&mut dyn FnMut(&str, &mut Vec<f64>)),
) -> Result<()> {
    let mut missing = Vec::new();
    let mut seen = 0usize;
    visit_mut(&mut |name, b| {
        seen += 1;
        match blobs.get(name) {
            Some(v) if v.len() == b.len() => b.copy_from_slice(v),
            _ => missing.push(name.to_string()),
        }
    });
    if !missing.is_empty() || seen != blobs.len() {
        bail!(
            "{}: checkpoint buffer set does not match the model ({} stored, {seen} in model, bad {missing:?})",
            path.display(),
            blobs.len()
        );
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string(value)?;
    fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let body = fs::read_to_string(path)
        .with_context(|| format!("opening checkpoint {}", path.display()))?;
    serde_json::from_str(&body).with_context(|| format!("parsing checkpoint {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use digitsv_core::pooling::PoolingConfig;
    use digitsv_core::speaker::speaker_embed;
    use digitsv_core::text::text_embed;
    use digitsv_core::rng;
    use rand::Rng;

    fn tiny_speaker() -> (SpeakerModel, SpeakerTrainConfig) {
        let cfg = EcapaLiteConfig {
            n_coeffs: 4,
            stem_channels: 6,
            mfa_channels: 6,
            embed_dim: 5,
            pooling: PoolingConfig { window: 4, stride: 2, ..PoolingConfig::default() },
        };
        let mut r = stream(3, "ckpt-test");
        let model = SpeakerModel::init(&cfg, 3, &mut r).unwrap();
        (model, SpeakerTrainConfig::default())
    }

    fn random_features(f: usize, t: usize, seed: u64) -> Tensor {
        let mut r = stream(seed, "ckpt-feat");
        let data: Vec<f64> = (0..f * t).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![f, t], data).unwrap()
    }

    #[test]
    fn speaker_checkpoint_round_trips_embeddings_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("speaker.json");
        let (mut model, train) = tiny_speaker();
        // make running buffers nontrivial so the round trip covers them
        model.visit_buffers_mut(&mut |_, b| {
            for (i, v) in b.iter_mut().enumerate() {
                *v += 0.01 * i as f64;
            }
        });
        let mut adam = AdamState::new();
        adam.t = 17;
        adam.m.insert("stem.weight".into(), vec![0.5; 3]);
        let speakers = vec!["spk00".to_string(), "spk01".into(), "spk02".into()];
        save_speaker(&path, &model, &speakers, &adam, &train, 5).unwrap();

        let loaded = load_speaker(&path).unwrap();
        assert_eq!(loaded.speakers, speakers);
        assert_eq!(loaded.next_epoch, 5);
        assert_eq!(loaded.adam.t, 17);
        assert_eq!(loaded.adam.m["stem.weight"], vec![0.5; 3]);
        assert_eq!(loaded.train.crop_frames, train.crop_frames);

        let feats = random_features(4, 9, 1);
        let a = speaker_embed(&model, &feats).unwrap();
        let b = speaker_embed(&loaded.model, &feats).unwrap();
        assert_eq!(a, b, "restored model must embed bit-identically");
    }

    #[test]
    fn corrupted_speaker_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("speaker.json");
        let (model, train) = tiny_speaker();
        let speakers = vec!["a".to_string(), "b".into()];
        save_speaker(&path, &model, &speakers, &AdamState::new(), &train, 0).unwrap();

        let mut ckpt: SpeakerCheckpoint = read_json(&path).unwrap();
        ckpt.params.remove("head.weight");
        write_json(&path, &ckpt).unwrap();
        let err = load_speaker(&path).err().expect("corrupted checkpoint must not load").to_string();
        assert!(err.contains("head.weight"), "unhelpful error: {err}");

        let mut ckpt: SpeakerCheckpoint = read_json(&path).unwrap();
        ckpt.params.insert(
            "head.weight".into(),
            TensorBlob { shape: vec![1, 1], data: vec![0.0] },
        );
        ckpt.params.get_mut("stem.bias").unwrap().shape = vec![999];
        write_json(&path, &ckpt).unwrap();
        assert!(load_speaker(&path).is_err());
    }

    #[test]
    fn text_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("text.json");
        let cfg = TransformerConfig {
            n_coeffs: 4,
            d_model: 8,
            heads: 2,
            d_qkv: None,
            d_ff: 12,
            encoder_blocks: 1,
            decoder_blocks: 1,
            conv_channels: 6,
            hidden: 4,
            text_embed_dim: 5,
            n_patterns: 2,
        };
        let mut r = stream(4, "ckpt-text");
        let model = TextModel::init(&cfg, &mut r).unwrap();
        let patterns = vec![
            PatternSection { id: "p0".into(), tokens: "1 2 3".into() },
            PatternSection { id: "p1".into(), tokens: "3 2 1".into() },
        ];
        let train = TextTrainConfig::default();
        save_text(&path, &model, &patterns, &AdamState::new(), &train, 2).unwrap();

        let loaded = load_text(&path).unwrap();
        assert_eq!(loaded.patterns, patterns);
        assert_eq!(loaded.next_epoch, 2);
        assert_eq!(loaded.model.cfg, cfg);
        let feats = {
            let m = random_features(4, 7, 2);
            // text features are [T, F]
            let mut rng2 = rng::stream(5, "t");
            let _ = &mut rng2;
            Tensor::new(vec![7, 4], m.data().to_vec()).unwrap()
        };
        let a = text_embed(&model, &feats).unwrap();
        let b = text_embed(&loaded.model, &feats).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fusion_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fusion.json");
        let mut r = stream(6, "ckpt-fuse");
        let model = CnnFusionModel::init(5, &mut r).unwrap();
        save_fusion(&path, &model, 5).unwrap();
        let loaded = load_fusion(&path).unwrap();
        let mut same = true;
        model.visit(&mut |name, t| {
            loaded.visit(&mut |n2, t2| {
                if n2 == name && t2.data() != t.data() {
                    same = false;
                }
            });
        });
        assert!(same, "restored fusion parameters differ");
    }
}
