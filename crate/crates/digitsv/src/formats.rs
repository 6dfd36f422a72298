//! On-disk interchange formats: corpus manifest, feature matrices, embedding
//! and trial CSVs, training logs, evaluation reports, and per-run manifests.
//!
//! All floating-point columns print with Rust's shortest round-trip `{}`
//! formatting, so reading a file back reproduces bit-identical values.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use digitsv_core::corpus::Split;
use digitsv_core::dsp::FeatureMatrix;
use digitsv_core::fusion::{EmbeddingRecord, Trial, UtteranceLabel};
use digitsv_core::metrics::{DetPoint, ScoreSet};
use digitsv_core::speaker::EpochLog;
use digitsv_core::text::TextStepLog;

// ---- corpus manifest ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub utterance_id: String,
    pub speaker_id: String,
    pub pattern_id: String,
    pub split: Split,
    /// WAV path relative to the manifest's directory.
    pub path: String,
    /// Space-separated token symbols, e.g. `8 1 7 PAUSE 3`.
    pub tokens: String,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["utterance_id", "speaker_id", "pattern_id", "split", "path", "tokens"])?;
    for r in rows {
        w.write_record([
            r.utterance_id.as_str(),
            r.speaker_id.as_str(),
            r.pattern_id.as_str(),
            r.split.as_str(),
            r.path.as_str(),
            r.tokens.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    expect_headers(&mut r, &["utterance_id", "speaker_id", "pattern_id", "split", "path", "tokens"], path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(ManifestRow {
            utterance_id: rec[0].to_string(),
            speaker_id: rec[1].to_string(),
            pattern_id: rec[2].to_string(),
            split: Split::parse(&rec[3]).map_err(anyhow::Error::msg)?,
            path: rec[4].to_string(),
            tokens: rec[5].to_string(),
        });
    }
    if rows.is_empty() {
        bail!("{}: empty manifest", path.display());
    }
    Ok(rows)
}

fn expect_headers(r: &mut csv::Reader<fs::File>, want: &[&str], path: &Path) -> Result<()> {
    let got = r.headers()?;
    if got.len() != want.len() || got.iter().zip(want).any(|(g, w)| g != *w) {
        bail!("{}: header {:?}, expected {:?}", path.display(), got, want);
    }
    Ok(())
}

// ---- feature matrices ----

const FEATURE_MAGIC: &[u8; 4] = b"DSVF";
const FEATURE_VERSION: u32 = 1;

/// Binary feature file: magic, version, rows, cols (u32 LE), then row-major
/// f64 LE data.
pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + m.data().len() * 8);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let mut f =
        fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut head = [0u8; 16];
    f.read_exact(&mut head)?;
    if &head[0..4] != FEATURE_MAGIC {
        bail!("{}: not a feature file", path.display());
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        bail!("{}: unsupported feature version {version}", path.display());
    }
    let rows = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    f.read_to_end(&mut body)?;
    if body.len() != rows * cols * 8 {
        bail!("{}: {} payload bytes for {rows}x{cols}", path.display(), body.len());
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(rows, cols, data).map_err(anyhow::Error::msg)
}

/// Canonical feature path for an utterance under the features directory.
pub fn feature_path(dir: &Path, utterance_id: &str) -> PathBuf {
    dir.join(format!("{utterance_id}.bin"))
}

// ---- embeddings ----

pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["utterance_id", "speaker_id", "pattern_id", "kind", "v0"])?;
    for r in records {
        for (kind, v) in [("spk", &r.speaker_embedding), ("txt", &r.text_embedding)] {
            let mut row = vec![
                r.utterance_id.clone(),
                r.speaker_id.clone(),
                r.pattern_id.clone(),
                kind.to_string(),
            ];
            row.extend(v.iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let headers = r.headers()?;
    if headers.len() < 5 || &headers[0] != "utterance_id" || &headers[3] != "kind" {
        bail!("{}: not an embedding file", path.display());
    }
    let mut records: Vec<EmbeddingRecord> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() < 5 {
            bail!("{}: embedding row with {} fields", path.display(), rec.len());
        }
        let id = &rec[0];
        let vector: Result<Vec<f64>> = rec
            .iter()
            .skip(4)
            .map(|s| s.parse::<f64>().with_context(|| format!("bad float {s:?} in {}", path.display())))
            .collect();
        let vector = vector?;
        let slot = match records.iter_mut().rev().find(|e| e.utterance_id == id) {
            Some(e) => e,
            None => {
                records.push(EmbeddingRecord {
                    utterance_id: id.to_string(),
                    speaker_id: rec[1].to_string(),
                    pattern_id: rec[2].to_string(),
                    speaker_embedding: Vec::new(),
                    text_embedding: Vec::new(),
                });
                records.last_mut().unwrap()
            }
        };
        match &rec[3] {
            "spk" => slot.speaker_embedding = vector,
            "txt" => slot.text_embedding = vector,
            other => bail!("{}: unknown embedding kind {other:?}", path.display()),
        }
    }
    for e in &records {
        if e.speaker_embedding.is_empty() || e.text_embedding.is_empty() {
            bail!("{}: utterance {} is missing a spk or txt row", path.display(), e.utterance_id);
        }
    }
    if records.is_empty() {
        bail!("{}: empty embedding file", path.display());
    }
    Ok(records)
}

// ---- trials and scores ----

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["enroll_id", "test_id", "label"])?;
    for t in trials {
        w.write_record([
            t.enroll.as_str(),
            t.test.as_str(),
            if t.is_target { "1" } else { "0" },
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let mut r = csv::Reader::from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    expect_headers(&mut r, &["enroll_id", "test_id", "label"], path)?;
    let mut trials = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        trials.push(Trial {
            enroll: rec[0].to_string(),
            test: rec[1].to_string(),
            is_target: parse_label(&rec[2], path)?,
        });
    }
    if trials.is_empty() {
        bail!("{}: empty trial file", path.display());
    }
    Ok(trials)
}

fn parse_label(s: &str, path: &Path) -> Result<bool> {
    match s {
        "1" => Ok(true),
        "0" => Ok(false),
        other => bail!("{}: label {other:?}, expected 1 or 0", path.display()),
    }
}

pub fn write_scores(path: &Path, trials: &[Trial], scores: &[f64]) -> Result<()> {
    if trials.len() != scores.len() {
        bail!("{} trials but {} scores", trials.len(), scores.len());
    }
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["enroll_id", "test_id", "label", "score"])?;
    for (t, s) in trials.iter().zip(scores) {
        w.write_record([
            t.enroll.as_str(),
            t.test.as_str(),
            if t.is_target { "1" } else { "0" },
            &s.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    let mut r = csv::Reader::from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    expect_headers(&mut r, &["enroll_id", "test_id", "label", "score"], path)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        labels.push(parse_label(&rec[2], path)?);
        scores.push(
            rec[3]
                .parse::<f64>()
                .with_context(|| format!("bad score {:?} in {}", &rec[3], path.display()))?,
        );
    }
    ScoreSet::new(scores, labels).map_err(anyhow::Error::msg)
}

/// Labels for trial construction, straight from manifest rows of one split.
pub fn manifest_labels(rows: &[ManifestRow], split: Split) -> Vec<UtteranceLabel> {
    rows.iter()
        .filter(|r| r.split == split)
        .map(|r| UtteranceLabel {
            utterance_id: r.utterance_id.clone(),
            speaker_id: r.speaker_id.clone(),
            pattern_id: r.pattern_id.clone(),
        })
        .collect()
}

// ---- training logs ----

/// Per-epoch loss curves (speaker and fusion training share the shape).
pub fn write_epoch_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["epoch", "lr", "loss"])?;
    for l in logs {
        w.write_record([l.epoch.to_string(), l.lr.to_string(), l.loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    expect_headers(&mut r, &["epoch", "lr", "loss"], path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(EpochLog { epoch: rec[0].parse()?, lr: rec[1].parse()?, loss: rec[2].parse()? });
    }
    Ok(out)
}

pub fn write_text_log(path: &Path, logs: &[TextStepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["epoch", "step", "lr", "l1", "l2", "l3", "total"])?;
    for l in logs {
        w.write_record([
            l.epoch.to_string(),
            l.step.to_string(),
            l.lr.to_string(),
            l.l1.to_string(),
            l.l2.to_string(),
            l.l3.to_string(),
            l.total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_text_log(path: &Path) -> Result<Vec<TextStepLog>> {
    let mut r = csv::Reader::from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    expect_headers(&mut r, &["epoch", "step", "lr", "l1", "l2", "l3", "total"], path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(TextStepLog {
            epoch: rec[0].parse()?,
            step: rec[1].parse()?,
            lr: rec[2].parse()?,
            l1: rec[3].parse()?,
            l2: rec[4].parse()?,
            l3: rec[5].parse()?,
            total: rec[6].parse()?,
        });
    }
    Ok(out)
}

// ---- evaluation outputs ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    pub min_dcf: f64,
    /// The EER operating threshold.
    pub threshold: f64,
    pub min_dcf_threshold: f64,
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let body =
        fs::read_to_string(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(serde_json::from_str(&body)?)
}

pub fn write_det_points(path: &Path, points: &[DetPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["threshold", "far", "frr"])?;
    for p in points {
        w.write_record([p.threshold.to_string(), p.far.to_string(), p.frr.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

// ---- pooling sweep table ----

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub window: usize,
    pub stride: usize,
    pub eer: f64,
    pub min_dcf: f64,
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["window", "stride", "eer", "min_dcf"])?;
    for r in rows {
        w.write_record([
            r.window.to_string(),
            r.stride.to_string(),
            r.eer.to_string(),
            r.min_dcf.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    expect_headers(&mut r, &["window", "stride", "eer", "min_dcf"], path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(SweepRow {
            window: rec[0].parse()?,
            stride: rec[1].parse()?,
            eer: rec[2].parse()?,
            min_dcf: rec[3].parse()?,
        });
    }
    Ok(out)
}

// ---- run manifest ----

/// What a command run recorded: inputs, outputs, the effective seed, and a
/// hash of the effective configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write as _;
        write!(out, "{b:02x}").unwrap();
    }
    out
}

pub fn write_run_manifest(dir: &Path, m: &RunManifest) -> Result<PathBuf> {
    let path = dir.join(format!("run_{}.json", m.command));
    let json = serde_json::to_string_pretty(m)?;
    let mut f =
        fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(json.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(path)
}
