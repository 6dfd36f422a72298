//! The work behind each CLI subcommand.
//!
//! Every command operates on an experiment directory with fixed file names so
//! stages compose without path plumbing: `manifest.csv` and `wav/` from
//! corpus generation, `features/` with one binary matrix per utterance,
//! `speaker.json` / `text.json` / `fusion.json` checkpoints with their
//! training logs, then per-split embedding, trial, and score CSVs. Each
//! command also drops a `run_<command>.json` manifest recording its inputs,
//! outputs, seed, and config hash.
//!
//! The functions return what they wrote so in-process callers (tests, the
//! sweep) can skip re-reading the files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use digitsv_core::corpus::{self, Split, TextPattern};
use digitsv_core::dsp::{self};
use digitsv_core::fusion::{self, EmbeddingRecord, Scorer, Strategy, Trial};
use digitsv_core::metrics::{self, ScoreSet};
use digitsv_core::optim::{decayed_lr, AdamState};
use digitsv_core::pooling::PoolingKind;
use digitsv_core::rng::stream;
use digitsv_core::speaker::{self, EpochLog, SpeakerModel, SpeakerTrainItem};
use digitsv_core::text::{self, TextModel, TextStepLog, TextTrainItem};

use crate::checkpoint;
use crate::config::{ExperimentConfig, PatternSection};
use crate::formats::{self, EvalReport, ManifestRow, RunManifest, SweepRow};
use crate::wav;
use crate::CoreExt;

// ---- experiment directory layout ----

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.csv")
}

pub fn wav_dir(dir: &Path) -> PathBuf {
    dir.join("wav")
}

pub fn features_dir(dir: &Path) -> PathBuf {
    dir.join("features")
}

pub fn speaker_ckpt_path(dir: &Path) -> PathBuf {
    dir.join("speaker.json")
}

pub fn speaker_log_path(dir: &Path) -> PathBuf {
    dir.join("speaker_log.csv")
}

pub fn text_ckpt_path(dir: &Path) -> PathBuf {
    dir.join("text.json")
}

pub fn text_log_path(dir: &Path) -> PathBuf {
    dir.join("text_log.csv")
}

pub fn fusion_ckpt_path(dir: &Path) -> PathBuf {
    dir.join("fusion.json")
}

pub fn fusion_log_path(dir: &Path) -> PathBuf {
    dir.join("fusion_log.csv")
}

pub fn embeddings_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("embeddings_{}.csv", split.as_str()))
}

pub fn trials_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("trials_{}.csv", split.as_str()))
}

pub fn scores_path(dir: &Path, strategy: Strategy) -> PathBuf {
    dir.join(format!("scores_{}.csv", strategy.as_str()))
}

pub fn report_path(dir: &Path) -> PathBuf {
    dir.join("report.json")
}

pub fn det_path(dir: &Path) -> PathBuf {
    dir.join("det.csv")
}

pub fn sweep_path(dir: &Path) -> PathBuf {
    dir.join("sweep.csv")
}

fn record_run(
    dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        seed: cfg.seed,
        config_sha256: cfg.sha256(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    formats::write_run_manifest(dir, &manifest)?;
    Ok(())
}

// ---- corpus and features ----

/// Synthesize every planned utterance into `dir/wav` and write the manifest.
pub fn gen_corpus(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<ManifestRow>> {
    let corpus_cfg = cfg.corpus_config()?;
    let plan = corpus::plan_corpus(&corpus_cfg).core_err()?;
    let wdir = wav_dir(dir);
    fs::create_dir_all(&wdir).with_context(|| format!("creating {}", wdir.display()))?;
    let mut rows = Vec::with_capacity(plan.len());
    for p in &plan {
        let pattern = &corpus_cfg.patterns[p.pattern_idx];
        let utterance_id = format!("s{:02}-{}-t{:02}", p.speaker_idx, pattern.id, p.take_idx);
        let wave =
            corpus::synth_utterance(&corpus_cfg.synth, p.speaker_idx, pattern, p.seed).core_err()?;
        let rel = format!("wav/{utterance_id}.wav");
        wav::write_wav(&dir.join(&rel), &wave, corpus_cfg.synth.sample_rate)?;
        rows.push(ManifestRow {
            utterance_id,
            speaker_id: format!("spk{:02}", p.speaker_idx),
            pattern_id: pattern.id.clone(),
            split: p.split,
            path: rel,
            tokens: pattern.tokens_string(),
        });
    }
    formats::write_manifest(&manifest_path(dir), &rows)?;
    record_run(dir, "gen-corpus", cfg, &[], &[manifest_path(dir), wdir])?;
    Ok(rows)
}

/// MFCC features for every manifest row, one binary file per utterance.
pub fn extract_features(cfg: &ExperimentConfig, dir: &Path) -> Result<usize> {
    let rows = formats::read_manifest(&manifest_path(dir))?;
    let mcfg = cfg.mfcc_config();
    mcfg.validate().core_err()?;
    let fdir = features_dir(dir);
    fs::create_dir_all(&fdir).with_context(|| format!("creating {}", fdir.display()))?;
    for row in &rows {
        let (wave, sr) = wav::read_wav(&dir.join(&row.path))?;
        if sr != mcfg.sample_rate {
            bail!("{}: wav sample rate {sr} does not match config {}", row.path, mcfg.sample_rate);
        }
        let m = dsp::mfcc(&wave, &mcfg).core_err()?;
        formats::write_features(&formats::feature_path(&fdir, &row.utterance_id), &m)?;
    }
    record_run(dir, "extract-features", cfg, &[manifest_path(dir)], &[fdir])?;
    Ok(rows.len())
}

// ---- datasets ----

pub struct SpeakerDataset {
    /// Speaker ids in class-index order (sorted).
    pub speakers: Vec<String>,
    pub items: Vec<SpeakerTrainItem>,
}

/// Train-split features as `[n_coeffs, T]` tensors with class labels taken
/// from the sorted speaker-id order.
pub fn load_speaker_dataset(dir: &Path, rows: &[ManifestRow]) -> Result<SpeakerDataset> {
    let train: Vec<&ManifestRow> = rows.iter().filter(|r| r.split == Split::Train).collect();
    let mut speakers: Vec<String> = train.iter().map(|r| r.speaker_id.clone()).collect();
    speakers.sort();
    speakers.dedup();
    if speakers.len() < 2 {
        bail!("speaker training needs at least two speakers, found {}", speakers.len());
    }
    let fdir = features_dir(dir);
    let mut items = Vec::with_capacity(train.len());
    for row in train {
        let feats = formats::read_features(&formats::feature_path(&fdir, &row.utterance_id))?;
        let class = speakers
            .binary_search(&row.speaker_id)
            .expect("speaker ids were collected from these rows");
        items.push(SpeakerTrainItem { features: feats.to_channel_tensor(), class });
    }
    Ok(SpeakerDataset { speakers, items })
}

pub struct TextDataset {
    /// Patterns in class-index order (sorted by id) with their token strings.
    pub patterns: Vec<PatternSection>,
    pub items: Vec<TextTrainItem>,
}

pub fn token_classes(pattern_id: &str, tokens: &str) -> Result<Vec<usize>> {
    let pattern = TextPattern::parse_tokens(pattern_id, tokens).core_err()?;
    Ok(pattern.tokens.iter().map(|t| t.class_index()).collect())
}

/// Train-split features as `[T, n_coeffs]` tensors with pattern classes and
/// token targets parsed from the manifest.
pub fn load_text_dataset(dir: &Path, rows: &[ManifestRow]) -> Result<TextDataset> {
    let train: Vec<&ManifestRow> = rows.iter().filter(|r| r.split == Split::Train).collect();
    let mut by_id: BTreeMap<&str, &str> = BTreeMap::new();
    for row in &train {
        match by_id.get(row.pattern_id.as_str()) {
            Some(tokens) if *tokens != row.tokens => {
                bail!("pattern {} appears with two different token strings", row.pattern_id)
            }
            Some(_) => {}
            None => {
                by_id.insert(&row.pattern_id, &row.tokens);
            }
        }
    }
    let patterns: Vec<PatternSection> = by_id
        .iter()
        .map(|(id, tokens)| PatternSection { id: id.to_string(), tokens: tokens.to_string() })
        .collect();
    if patterns.len() < 2 {
        bail!("text training needs at least two patterns, found {}", patterns.len());
    }
    let fdir = features_dir(dir);
    let mut items = Vec::with_capacity(train.len());
    for row in train {
        let feats = formats::read_features(&formats::feature_path(&fdir, &row.utterance_id))?;
        let pattern = patterns
            .binary_search_by(|p| p.id.as_str().cmp(&row.pattern_id))
            .expect("pattern ids were collected from these rows");
        items.push(TextTrainItem {
            features: feats.to_tensor(),
            tokens: token_classes(&row.pattern_id, &row.tokens)?,
            pattern,
        });
    }
    Ok(TextDataset { patterns, items })
}

// ---- training ----

/// Train (or resume) the speaker encoder and checkpoint it with its class
/// order. Returns the full epoch log history, resumed epochs included.
pub fn train_speaker(cfg: &ExperimentConfig, dir: &Path, resume: bool) -> Result<Vec<EpochLog>> {
    let rows = formats::read_manifest(&manifest_path(dir))?;
    let ds = load_speaker_dataset(dir, &rows)?;
    let ckpt = speaker_ckpt_path(dir);
    let (mut model, mut adam, train_cfg, start_epoch) = if resume {
        let loaded = checkpoint::load_speaker(&ckpt)?;
        if loaded.speakers != ds.speakers {
            bail!("resume: the train split's speaker set no longer matches the checkpoint");
        }
        let mut want = cfg.speaker_train();
        want.epochs = loaded.train.epochs;
        if want != loaded.train {
            bail!("resume: training config changed; only `epochs` may differ from the checkpoint");
        }
        let mut tc = loaded.train;
        tc.epochs = cfg.speaker.epochs;
        (loaded.model, loaded.adam, tc, loaded.next_epoch)
    } else {
        let mut rng = stream(cfg.seed, "speaker-init");
        let model = SpeakerModel::init(&cfg.speaker_config()?, ds.speakers.len(), &mut rng)
            .core_err()?;
        (model, AdamState::new(), cfg.speaker_train(), 0)
    };
    if start_epoch >= train_cfg.epochs {
        bail!("nothing to train: checkpoint is at epoch {start_epoch} of {}", train_cfg.epochs);
    }
    let new_logs =
        speaker::train_speaker(&mut model, &mut adam, &ds.items, &train_cfg, start_epoch)
            .core_err()?;
    checkpoint::save_speaker(&ckpt, &model, &ds.speakers, &adam, &train_cfg, train_cfg.epochs)?;
    let log_path = speaker_log_path(dir);
    let mut logs = if resume && log_path.exists() {
        formats::read_epoch_log(&log_path)?
    } else {
        Vec::new()
    };
    logs.retain(|l| l.epoch < start_epoch);
    logs.extend(new_logs);
    formats::write_epoch_log(&log_path, &logs)?;
    record_run(dir, "train-speaker", cfg, &[manifest_path(dir)], &[ckpt, log_path])?;
    Ok(logs)
}

/// Train (or resume) the text encoder. Returns the full step log history.
pub fn train_text(cfg: &ExperimentConfig, dir: &Path, resume: bool) -> Result<Vec<TextStepLog>> {
    let rows = formats::read_manifest(&manifest_path(dir))?;
    let ds = load_text_dataset(dir, &rows)?;
    let ckpt = text_ckpt_path(dir);
    let (mut model, mut adam, train_cfg, start_epoch) = if resume {
        let loaded = checkpoint::load_text(&ckpt)?;
        if loaded.patterns != ds.patterns {
            bail!("resume: the train split's pattern set no longer matches the checkpoint");
        }
        let mut want = cfg.text_train();
        want.epochs = loaded.train.epochs;
        if want != loaded.train {
            bail!("resume: training config changed; only `epochs` may differ from the checkpoint");
        }
        let mut tc = loaded.train;
        tc.epochs = cfg.text.epochs;
        (loaded.model, loaded.adam, tc, loaded.next_epoch)
    } else {
        let mut rng = stream(cfg.seed, "text-init");
        let model =
            TextModel::init(&cfg.text_config(ds.patterns.len()), &mut rng).core_err()?;
        (model, AdamState::new(), cfg.text_train(), 0)
    };
    if start_epoch >= train_cfg.epochs {
        bail!("nothing to train: checkpoint is at epoch {start_epoch} of {}", train_cfg.epochs);
    }
    let new_logs =
        text::train_text(&mut model, &mut adam, &ds.items, &train_cfg, start_epoch).core_err()?;
    checkpoint::save_text(&ckpt, &model, &ds.patterns, &adam, &train_cfg, train_cfg.epochs)?;
    let log_path = text_log_path(dir);
    let mut logs = if resume && log_path.exists() {
        formats::read_text_log(&log_path)?
    } else {
        Vec::new()
    };
    logs.retain(|l| l.epoch < start_epoch);
    logs.extend(new_logs);
    formats::write_text_log(&log_path, &logs)?;
    record_run(dir, "train-text", cfg, &[manifest_path(dir)], &[ckpt, log_path])?;
    Ok(logs)
}

// ---- embeddings, trials, scoring ----

/// Embed one split with both trained encoders and write the embedding CSV.
pub fn embed(cfg: &ExperimentConfig, dir: &Path, split: Split) -> Result<Vec<EmbeddingRecord>> {
    let rows = formats::read_manifest(&manifest_path(dir))?;
    let spk = checkpoint::load_speaker(&speaker_ckpt_path(dir))?;
    let txt = checkpoint::load_text(&text_ckpt_path(dir))?;
    let fdir = features_dir(dir);
    let mut records = Vec::new();
    for row in rows.iter().filter(|r| r.split == split) {
        let feats = formats::read_features(&formats::feature_path(&fdir, &row.utterance_id))?;
        let speaker_embedding =
            speaker::speaker_embed(&spk.model, &feats.to_channel_tensor())
                .core_err()?;
        let text_embedding =
            text::text_embed(&txt.model, &feats.to_tensor()).core_err()?;
        records.push(EmbeddingRecord {
            utterance_id: row.utterance_id.clone(),
            speaker_id: row.speaker_id.clone(),
            pattern_id: row.pattern_id.clone(),
            speaker_embedding,
            text_embedding,
        });
    }
    if records.is_empty() {
        bail!("no {} utterances in the manifest", split.as_str());
    }
    let path = embeddings_path(dir, split);
    formats::write_embeddings(&path, &records)?;
    record_run(dir, "embed", cfg, &[manifest_path(dir)], &[path])?;
    Ok(records)
}

/// Sample the balanced joint-protocol trial list for one split.
pub fn make_trials(cfg: &ExperimentConfig, dir: &Path, split: Split) -> Result<Vec<Trial>> {
    let rows = formats::read_manifest(&manifest_path(dir))?;
    let labels = formats::manifest_labels(&rows, split);
    let trials =
        fusion::make_trials(&labels, &cfg.trial_counts(), cfg.trial_seed()).core_err()?;
    let path = trials_path(dir, split);
    formats::write_trials(&path, &trials)?;
    record_run(dir, "make-trials", cfg, &[manifest_path(dir)], &[path])?;
    Ok(trials)
}

/// Score one split's trials with the given back-end and write the score CSV.
pub fn score(
    cfg: &ExperimentConfig,
    dir: &Path,
    strategy: Strategy,
    split: Split,
) -> Result<ScoreSet> {
    let epath = embeddings_path(dir, split);
    let tpath = trials_path(dir, split);
    let records = formats::read_embeddings(&epath)?;
    let trials = formats::read_trials(&tpath)?;
    let cnn;
    let scorer = match strategy {
        Strategy::SpeakerOnly => Scorer::SpeakerOnly,
        Strategy::Add => Scorer::Add,
        Strategy::Mul => Scorer::Mul,
        Strategy::Cnn => {
            cnn = checkpoint::load_fusion(&fusion_ckpt_path(dir))?;
            Scorer::Cnn(&cnn)
        }
    };
    let set = fusion::score_trials(&records, &trials, &scorer).core_err()?;
    let path = scores_path(dir, strategy);
    formats::write_scores(&path, &trials, set.scores())?;
    record_run(dir, "score", cfg, &[epath, tpath], &[path])?;
    Ok(set)
}

/// Train the CNN fusion head on the train split's embeddings and trials.
pub fn fuse_train(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<EpochLog>> {
    let epath = embeddings_path(dir, Split::Train);
    let tpath = trials_path(dir, Split::Train);
    let records = formats::read_embeddings(&epath)?;
    let trials = formats::read_trials(&tpath)?;
    let tc = cfg.cnn_train();
    let (model, losses) = fusion::train_cnn_fusion(&records, &trials, &tc).core_err()?;
    let ckpt = fusion_ckpt_path(dir);
    checkpoint::save_fusion(&ckpt, &model, tc.channels)?;
    let logs: Vec<EpochLog> = losses
        .iter()
        .enumerate()
        .map(|(e, &loss)| EpochLog {
            epoch: e as u32,
            lr: decayed_lr(tc.base_lr, e as u32),
            loss,
        })
        .collect();
    let log_path = fusion_log_path(dir);
    formats::write_epoch_log(&log_path, &logs)?;
    record_run(dir, "fuse-train", cfg, &[epath, tpath], &[ckpt, log_path])?;
    Ok(logs)
}

// ---- evaluation ----

/// EER and minDCF for a score file; optionally writes `report.json` and the
/// DET sweep CSV into `out`.
pub fn evaluate(
    cfg: &ExperimentConfig,
    scores: &Path,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let set = formats::read_scores(scores)?;
    let (eer, threshold) = metrics::eer(&set).core_err()?;
    let (min_dcf, min_dcf_threshold) = metrics::min_dcf(
        &set,
        metrics::DEFAULT_P_TARGET,
        metrics::DEFAULT_C_MISS,
        metrics::DEFAULT_C_FA,
    )
    .core_err()?;
    let report = EvalReport { eer, min_dcf, threshold, min_dcf_threshold };
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        formats::write_report(&report_path(dir), &report)?;
        formats::write_det_points(&det_path(dir), &metrics::det_points(&set))?;
        record_run(
            dir,
            "eval",
            cfg,
            &[scores.to_path_buf()],
            &[report_path(dir), det_path(dir)],
        )?;
    }
    Ok(report)
}

/// Train one speaker model per (window, stride) cell, score the test split
/// speaker-only, and tabulate EER/minDCF. All cells share the experiment
/// seed, corpus, and trial list so only the pooling geometry moves.
pub fn sweep_pooling(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<SweepRow>> {
    PoolingKind::parse(&cfg.sweep.kind).core_err()?;
    if cfg.sweep.cells.is_empty() {
        bail!("sweep: no (window, stride) cells configured");
    }
    let rows = formats::read_manifest(&manifest_path(dir))?;
    let ds = load_speaker_dataset(dir, &rows)?;
    let labels = formats::manifest_labels(&rows, Split::Test);
    let trials =
        fusion::make_trials(&labels, &cfg.trial_counts(), cfg.trial_seed()).core_err()?;
    let fdir = features_dir(dir);
    let test_rows: Vec<&ManifestRow> = rows.iter().filter(|r| r.split == Split::Test).collect();
    let mut out = Vec::new();
    for &(window, stride) in &cfg.sweep.cells {
        let mut cell = cfg.clone();
        cell.pooling.kind = cfg.sweep.kind.clone();
        cell.pooling.window = window;
        cell.pooling.stride = stride;
        let mut rng = stream(cell.seed, "speaker-init");
        let mut model =
            SpeakerModel::init(&cell.speaker_config()?, ds.speakers.len(), &mut rng).core_err()?;
        let mut adam = AdamState::new();
        speaker::train_speaker(&mut model, &mut adam, &ds.items, &cell.speaker_train(), 0)
            .core_err()?;
        let mut embeds: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for row in &test_rows {
            let feats =
                formats::read_features(&formats::feature_path(&fdir, &row.utterance_id))?;
            let e = speaker::speaker_embed(&model, &feats.to_channel_tensor())
                .core_err()?;
            embeds.insert(&row.utterance_id, e);
        }
        let mut scores = Vec::with_capacity(trials.len());
        let mut is_target = Vec::with_capacity(trials.len());
        for t in &trials {
            let enroll = embeds
                .get(t.enroll.as_str())
                .with_context(|| format!("trial references unknown utterance {}", t.enroll))?;
            let test = embeds
                .get(t.test.as_str())
                .with_context(|| format!("trial references unknown utterance {}", t.test))?;
            scores.push(fusion::cosine(enroll, test).core_err()?);
            is_target.push(t.is_target);
        }
        let set = ScoreSet::new(scores, is_target).core_err()?;
        let (eer, _) = metrics::eer(&set).core_err()?;
        let (min_dcf, _) = metrics::min_dcf(
            &set,
            metrics::DEFAULT_P_TARGET,
            metrics::DEFAULT_C_MISS,
            metrics::DEFAULT_C_FA,
        )
        .core_err()?;
        eprintln!("sweep w={window} s={stride}: eer={eer:.4} min_dcf={min_dcf:.4}");
        out.push(SweepRow { window, stride, eer, min_dcf });
    }
    let path = sweep_path(dir);
    formats::write_sweep(&path, &out)?;
    record_run(dir, "sweep-pooling", cfg, &[manifest_path(dir)], &[path])?;
    Ok(out)
}
