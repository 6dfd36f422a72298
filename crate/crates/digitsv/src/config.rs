//! Experiment configuration: one strict JSON document covering corpus,
//! features, models, pooling, trials, fusion, and the pooling sweep.
//!
//! Unknown keys are rejected so a typo in a sweep config fails loudly instead
//! of silently running defaults. Every section may be omitted and falls back
//! to the desk-scale defaults. `DIGITSV_SEED` overrides the configured seed.

use std::env;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use digitsv_core::corpus::{default_patterns, CorpusConfig, SynthConfig, TextPattern};
use digitsv_core::dsp::MfccConfig;
use digitsv_core::fusion::{CnnTrainConfig, Strategy, TrialCounts};
use digitsv_core::pooling::{PoolingConfig, PoolingKind};
use digitsv_core::rng::derive_seed;
use digitsv_core::speaker::{AamConfig, EcapaLiteConfig, SpeakerTrainConfig};
use digitsv_core::text::{TextTrainConfig, TransformerConfig, TripleLossWeights};

use crate::formats::sha256_hex;

pub const SEED_ENV: &str = "DIGITSV_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub features: FeatureSection,
    pub speaker: SpeakerSection,
    pub text: TextSection,
    pub pooling: PoolingSection,
    pub trials: TrialSection,
    pub fusion: FusionSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            corpus: CorpusSection::default(),
            features: FeatureSection::default(),
            speaker: SpeakerSection::default(),
            text: TextSection::default(),
            pooling: PoolingSection::default(),
            trials: TrialSection::default(),
            fusion: FusionSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_speakers: usize,
    pub utterances_per_cell: usize,
    pub train_fraction: f64,
    /// `id` + space-separated token string per pattern; empty means the six
    /// stock patterns.
    pub patterns: Vec<PatternSection>,
    pub sample_rate: u32,
    pub digit_ms: f64,
    pub pause_ms: f64,
    pub duration_jitter: f64,
    pub amp: f64,
    pub amp_jitter: f64,
    pub n_harmonics: usize,
    pub f0_base: f64,
    pub f0_step: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        CorpusSection {
            n_speakers: 12,
            utterances_per_cell: 20,
            train_fraction: 0.8,
            patterns: Vec::new(),
            sample_rate: s.sample_rate,
            digit_ms: s.digit_ms,
            pause_ms: s.pause_ms,
            duration_jitter: s.duration_jitter,
            amp: s.amp,
            amp_jitter: s.amp_jitter,
            n_harmonics: s.n_harmonics,
            f0_base: s.f0_base,
            f0_step: s.f0_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSection {
    pub id: String,
    pub tokens: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSection {
    pub frame_len: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub pre_emphasis: f64,
}

impl Default for FeatureSection {
    fn default() -> Self {
        let m = MfccConfig::default();
        FeatureSection {
            frame_len: m.frame_len,
            hop: m.hop,
            n_mels: m.n_mels,
            n_coeffs: m.n_coeffs,
            pre_emphasis: m.pre_emphasis,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeakerSection {
    pub stem_channels: usize,
    pub mfa_channels: usize,
    pub embed_dim: usize,
    pub epochs: u32,
    pub batch_size: usize,
    pub base_lr: f64,
    pub crop_frames: usize,
    pub aam_margin: f64,
    pub aam_scale: f64,
}

impl Default for SpeakerSection {
    fn default() -> Self {
        let m = EcapaLiteConfig::default();
        let t = SpeakerTrainConfig::default();
        SpeakerSection {
            stem_channels: m.stem_channels,
            mfa_channels: m.mfa_channels,
            embed_dim: m.embed_dim,
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            crop_frames: t.crop_frames,
            aam_margin: t.aam.margin,
            aam_scale: t.aam.scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextSection {
    pub d_model: usize,
    pub heads: usize,
    pub d_qkv: Option<usize>,
    pub d_ff: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub conv_channels: usize,
    pub hidden: usize,
    pub text_embed_dim: usize,
    pub epochs: u32,
    pub batch_size: usize,
    pub base_lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for TextSection {
    fn default() -> Self {
        let m = TransformerConfig::default();
        let t = TextTrainConfig::default();
        let w = TripleLossWeights::default();
        TextSection {
            d_model: m.d_model,
            heads: m.heads,
            d_qkv: m.d_qkv,
            d_ff: m.d_ff,
            encoder_blocks: m.encoder_blocks,
            decoder_blocks: m.decoder_blocks,
            conv_channels: m.conv_channels,
            hidden: m.hidden,
            text_embed_dim: m.text_embed_dim,
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolingSection {
    pub kind: String,
    pub window: usize,
    pub stride: usize,
    pub heads: usize,
    pub d_k: Option<usize>,
    pub hidden: usize,
    pub share_outer: bool,
}

impl Default for PoolingSection {
    fn default() -> Self {
        PoolingSection::from_core(&PoolingConfig::default())
    }
}

impl PoolingSection {
    pub fn from_core(p: &PoolingConfig) -> Self {
        PoolingSection {
            kind: p.kind.as_str().to_string(),
            window: p.window,
            stride: p.stride,
            heads: p.heads,
            d_k: p.d_k,
            hidden: p.hidden,
            share_outer: p.share_outer,
        }
    }

    pub fn to_core(&self) -> Result<PoolingConfig> {
        Ok(PoolingConfig {
            kind: PoolingKind::parse(&self.kind).map_err(anyhow::Error::msg)?,
            window: self.window,
            stride: self.stride,
            heads: self.heads,
            d_k: self.d_k,
            hidden: self.hidden,
            share_outer: self.share_outer,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialSection {
    pub same_spk_same_text: usize,
    pub same_spk_diff_text: usize,
    pub diff_spk_same_text: usize,
    pub diff_spk_diff_text: usize,
}

impl Default for TrialSection {
    fn default() -> Self {
        let c = TrialCounts::default();
        TrialSection {
            same_spk_same_text: c.same_spk_same_text,
            same_spk_diff_text: c.same_spk_diff_text,
            diff_spk_same_text: c.diff_spk_same_text,
            diff_spk_diff_text: c.diff_spk_diff_text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub strategy: String,
    pub channels: usize,
    pub epochs: u32,
    pub batch_size: usize,
    pub base_lr: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        let c = CnnTrainConfig::default();
        FusionSection {
            strategy: Strategy::Mul.as_str().to_string(),
            channels: c.channels,
            epochs: c.epochs,
            batch_size: c.batch_size,
            base_lr: c.base_lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// `(window, stride)` grid cells, evaluated in order.
    pub cells: Vec<(usize, usize)>,
    /// Pooling kind used for every cell.
    pub kind: String,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            cells: vec![(4, 2), (4, 4), (8, 2), (8, 4)],
            kind: PoolingKind::AspSwasp.as_str().to_string(),
        }
    }
}

impl ExperimentConfig {
    pub fn corpus_config(&self) -> Result<CorpusConfig> {
        let c = &self.corpus;
        let patterns = if c.patterns.is_empty() {
            default_patterns()
        } else {
            c.patterns
                .iter()
                .map(|p| TextPattern::parse_tokens(&p.id, &p.tokens).map_err(anyhow::Error::msg))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(CorpusConfig {
            n_speakers: c.n_speakers,
            patterns,
            utterances_per_cell: c.utterances_per_cell,
            train_fraction: c.train_fraction,
            seed: self.seed,
            synth: SynthConfig {
                sample_rate: c.sample_rate,
                digit_ms: c.digit_ms,
                pause_ms: c.pause_ms,
                duration_jitter: c.duration_jitter,
                amp: c.amp,
                amp_jitter: c.amp_jitter,
                n_harmonics: c.n_harmonics,
                f0_base: c.f0_base,
                f0_step: c.f0_step,
            },
        })
    }

    pub fn mfcc_config(&self) -> MfccConfig {
        let f = &self.features;
        MfccConfig {
            sample_rate: self.corpus.sample_rate,
            frame_len: f.frame_len,
            hop: f.hop,
            n_mels: f.n_mels,
            n_coeffs: f.n_coeffs,
            pre_emphasis: f.pre_emphasis,
            ..MfccConfig::default()
        }
    }

    pub fn pooling_config(&self) -> Result<PoolingConfig> {
        self.pooling.to_core()
    }

    pub fn speaker_config(&self) -> Result<EcapaLiteConfig> {
        let s = &self.speaker;
        Ok(EcapaLiteConfig {
            n_coeffs: self.features.n_coeffs,
            stem_channels: s.stem_channels,
            mfa_channels: s.mfa_channels,
            embed_dim: s.embed_dim,
            pooling: self.pooling_config()?,
        })
    }

    pub fn speaker_train(&self) -> SpeakerTrainConfig {
        let s = &self.speaker;
        SpeakerTrainConfig {
            epochs: s.epochs,
            batch_size: s.batch_size,
            base_lr: s.base_lr,
            crop_frames: s.crop_frames,
            seed: derive_seed(self.seed, "train-speaker"),
            aam: AamConfig { margin: s.aam_margin, scale: s.aam_scale },
        }
    }

    pub fn text_config(&self, n_patterns: usize) -> TransformerConfig {
        let t = &self.text;
        TransformerConfig {
            n_coeffs: self.features.n_coeffs,
            d_model: t.d_model,
            heads: t.heads,
            d_qkv: t.d_qkv,
            d_ff: t.d_ff,
            encoder_blocks: t.encoder_blocks,
            decoder_blocks: t.decoder_blocks,
            conv_channels: t.conv_channels,
            hidden: t.hidden,
            text_embed_dim: t.text_embed_dim,
            n_patterns,
        }
    }

    pub fn text_train(&self) -> TextTrainConfig {
        let t = &self.text;
        TextTrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            seed: derive_seed(self.seed, "train-text"),
            weights: TripleLossWeights { alpha: t.alpha, beta: t.beta, gamma: t.gamma },
        }
    }

    pub fn trial_counts(&self) -> TrialCounts {
        let t = &self.trials;
        TrialCounts {
            same_spk_same_text: t.same_spk_same_text,
            same_spk_diff_text: t.same_spk_diff_text,
            diff_spk_same_text: t.diff_spk_same_text,
            diff_spk_diff_text: t.diff_spk_diff_text,
        }
    }

    pub fn trial_seed(&self) -> u64 {
        derive_seed(self.seed, "trials")
    }

    pub fn strategy(&self) -> Result<Strategy> {
        Strategy::parse(&self.fusion.strategy).map_err(anyhow::Error::msg)
    }

    pub fn cnn_train(&self) -> CnnTrainConfig {
        let f = &self.fusion;
        CnnTrainConfig {
            channels: f.channels,
            epochs: f.epochs,
            batch_size: f.batch_size,
            base_lr: f.base_lr,
            seed: derive_seed(self.seed, "fuse-train"),
        }
    }

    /// Hash of the effective configuration (after any env override), recorded
    /// in run manifests.
    pub fn sha256(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        sha256_hex(json.as_bytes())
    }
}

/// Loads the config file (or defaults), then applies the `DIGITSV_SEED`
/// environment override.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let body = fs::read_to_string(p)
                .with_context(|| format!("opening config {}", p.display()))?;
            serde_json::from_str(&body)
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Ok(s) = env::var(SEED_ENV) {
        cfg.seed = s
            .parse()
            .with_context(|| format!("{SEED_ENV} must be an unsigned integer, got {s:?}"))?;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = ExperimentConfig::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"seed": 3, "corpus": {"n_speakers": 4}}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.corpus.n_speakers, 4);
        assert_eq!(cfg.corpus.utterances_per_cell, 20);
        assert_eq!(cfg.speaker.stem_channels, 48);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"sede": 3}"#).unwrap_err();
        assert!(err.to_string().contains("sede"));
        assert!(serde_json::from_str::<ExperimentConfig>(
            r#"{"pooling": {"windw": 8}}"#
        )
        .is_err());
    }

    #[test]
    fn paper_shape_sweep_grid_is_accepted() {
        let json = r#"{"sweep": {"cells": [[2,1],[2,2],[2,4],[4,1],[4,2],[4,4],[8,1],[8,2],[8,4]]}}"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.sweep.cells.len(), 9);
    }

    #[test]
    fn derived_configs_match_core_defaults() {
        let cfg = ExperimentConfig::default();
        let corpus = cfg.corpus_config().unwrap();
        assert_eq!(corpus.n_speakers, 12);
        assert_eq!(corpus.patterns.len(), 6);
        assert_eq!(corpus.seed, cfg.seed);
        let speaker = cfg.speaker_config().unwrap();
        speaker.validate().unwrap();
        let text = cfg.text_config(corpus.patterns.len());
        text.validate().unwrap();
        assert_eq!(text.n_patterns, 6);
        cfg.strategy().unwrap();
        let mfcc = cfg.mfcc_config();
        mfcc.validate().unwrap();
    }

    #[test]
    fn custom_patterns_parse() {
        let json = r#"{"corpus": {"patterns": [
            {"id": "p1", "tokens": "1 2 PAUSE 3"},
            {"id": "p2", "tokens": "3 2 1"}
        ], "n_speakers": 2}}"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        let corpus = cfg.corpus_config().unwrap();
        assert_eq!(corpus.patterns.len(), 2);
        assert_eq!(corpus.patterns[0].pause_count(), 1);
        let bad = r#"{"corpus": {"patterns": [{"id": "p", "tokens": "1 x"}]}}"#;
        let cfg: ExperimentConfig = serde_json::from_str(bad).unwrap();
        assert!(cfg.corpus_config().is_err());
    }

    #[test]
    fn seed_env_override_applies() {
        // temp-env style: set, load, restore
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 1}"#).unwrap();
        env::set_var(SEED_ENV, "99");
        let cfg = load_config(Some(&path)).unwrap();
        env::remove_var(SEED_ENV);
        assert_eq!(cfg.seed, 99);
        let cfg = load_config(Some(&path)).unwrap();
        assert_eq!(cfg.seed, 1);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        assert_eq!(a.sha256(), b.sha256());
        b.seed += 1;
        assert_ne!(a.sha256(), b.sha256());
    }
}
