//! Synthetic digit-string corpus: text patterns, utterance synthesis, splits.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dsp::harmonic_tone;
use crate::dsp::silence;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{derive_seed, stream, Prng};
use rand::SeedableRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Digit(u8),
    Pause,
}

impl Token {
    pub fn symbol(&self) -> String {
        match self {
            Token::Digit(d) => d.to_string(),
            Token::Pause => "PAUSE".to_string(),
        }
    }

    pub fn parse_symbol(s: &str) -> Result<Token> {
        if s == "PAUSE" {
            return Ok(Token::Pause);
        }
        match s.parse::<u8>() {
            Ok(d) if d <= 9 => Ok(Token::Digit(d)),
            _ => Err(Error::vocab(format!("unknown token symbol {s:?}"))),
        }
    }

    /// Class index over the spoken vocabulary: digits 0..=9, PAUSE = 10.
    pub fn class_index(&self) -> usize {
        match self {
            Token::Digit(d) => *d as usize,
            Token::Pause => 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextPattern {
    pub id: String,
    pub tokens: Vec<Token>,
}

impl TextPattern {
    pub fn new(id: &str, tokens: Vec<Token>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::contract(format!("pattern {id}: empty token sequence")));
        }
        Ok(TextPattern { id: id.to_string(), tokens })
    }

    /// Digits with PAUSE inserted between the given groups.
    fn grouped(id: &str, digits: &[u8], groups: &[usize]) -> Self {
        assert_eq!(groups.iter().sum::<usize>(), digits.len());
        let mut tokens = Vec::new();
        let mut pos = 0;
        for (gi, &g) in groups.iter().enumerate() {
            if gi > 0 {
                tokens.push(Token::Pause);
            }
            for &d in &digits[pos..pos + g] {
                tokens.push(Token::Digit(d));
            }
            pos += g;
        }
        TextPattern { id: id.to_string(), tokens }
    }

    pub fn pause_count(&self) -> usize {
        self.tokens.iter().filter(|t| **t == Token::Pause).count()
    }

    pub fn tokens_string(&self) -> String {
        let parts: Vec<String> = self.tokens.iter().map(Token::symbol).collect();
        parts.join(" ")
    }

    pub fn parse_tokens(id: &str, s: &str) -> Result<Self> {
        let tokens: Result<Vec<Token>> = s.split_whitespace().map(Token::parse_symbol).collect();
        TextPattern::new(id, tokens?)
    }
}

/// The six stock patterns: one digit string read with four pause rhythms,
/// plus a second string sharing two of those rhythms.
pub fn default_patterns() -> Vec<TextPattern> {
    let a = [8, 1, 7, 3, 2, 5, 9, 6, 0, 4];
    let b = [9, 4, 0, 5, 3, 7, 2, 6, 8, 1];
    vec![
        TextPattern::grouped("d001", &a, &[10]),
        TextPattern::grouped("d002", &a, &[4, 4, 2]),
        TextPattern::grouped("d003", &a, &[3, 3, 3, 1]),
        TextPattern::grouped("d004", &a, &[2, 2, 2, 2, 2]),
        TextPattern::grouped("d005", &b, &[4, 4, 2]),
        TextPattern::grouped("d006", &b, &[3, 3, 3, 1]),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub digit_ms: f64,
    pub pause_ms: f64,
    /// Uniform relative jitter on each token's duration.
    pub duration_jitter: f64,
    pub amp: f64,
    /// Uniform relative jitter on each utterance's amplitude.
    pub amp_jitter: f64,
    pub n_harmonics: usize,
    pub f0_base: f64,
    pub f0_step: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sample_rate: 16_000,
            digit_ms: 300.0,
            pause_ms: 200.0,
            duration_jitter: 0.1,
            amp: 0.3,
            amp_jitter: 0.15,
            n_harmonics: 6,
            f0_base: 110.0,
            f0_step: 3.2,
        }
    }
}

impl SynthConfig {
    pub fn speaker_f0(&self, speaker_idx: usize) -> f64 {
        self.f0_base + self.f0_step * speaker_idx as f64
    }
}

/// Per-digit harmonic amplitude profile; the fundamental anchors at 1.0 and
/// higher partials fall in [0.25, 1.0], all derived from the digit alone.
pub fn digit_harmonics(digit: u8, n_harmonics: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_harmonics);
    out.push(1.0);
    for h in 1..n_harmonics {
        let mut x = (digit as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(h as u64);
        x ^= x >> 30;
        x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x ^= x >> 27;
        x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
        let u = (x >> 11) as f64 / (1u64 << 53) as f64;
        out.push(0.25 + 0.75 * u);
    }
    out
}

/// Render one utterance deterministically from `(speaker, pattern, seed)`.
pub fn synth_utterance(
    cfg: &SynthConfig,
    speaker_idx: usize,
    pattern: &TextPattern,
    seed: u64,
) -> Result<Vec<f64>> {
    if pattern.tokens.is_empty() {
        return Err(Error::contract("synth: empty pattern"));
    }
    let mut rng = Prng::seed_from_u64(seed);
    let sr = cfg.sample_rate as f64;
    let f0 = cfg.speaker_f0(speaker_idx);
    let amp = cfg.amp * jittered(&mut rng, cfg.amp_jitter);
    let mut wave = Vec::new();
    for token in &pattern.tokens {
        let base_ms = match token {
            Token::Digit(_) => cfg.digit_ms,
            Token::Pause => cfg.pause_ms,
        };
        let dur = base_ms / 1000.0 * jittered(&mut rng, cfg.duration_jitter);
        let n = math::round(dur * sr) as usize;
        match token {
            Token::Digit(d) => {
                let profile = digit_harmonics(*d, cfg.n_harmonics);
                wave.extend(harmonic_tone(f0, &profile, n, amp, cfg.sample_rate)?);
            }
            Token::Pause => wave.extend(silence(n)),
        }
    }
    Ok(wave)
}

fn jittered(rng: &mut Prng, frac: f64) -> f64 {
    1.0 + frac * (2.0 * rng.random::<f64>() - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::vocab(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub patterns: Vec<TextPattern>,
    pub utterances_per_cell: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub synth: SynthConfig,
}

impl CorpusConfig {
    pub fn desk_default(seed: u64) -> Self {
        CorpusConfig {
            n_speakers: 12,
            patterns: default_patterns(),
            utterances_per_cell: 20,
            train_fraction: 0.8,
            seed,
            synth: SynthConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::contract("corpus: need at least 2 speakers"));
        }
        if self.patterns.len() < 2 {
            return Err(Error::contract("corpus: need at least 2 patterns"));
        }
        if self.utterances_per_cell == 0 {
            return Err(Error::contract("corpus: zero utterances per cell"));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::contract("corpus: train fraction outside [0, 1]"));
        }
        let mut ids: Vec<&str> = self.patterns.iter().map(|p| p.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.patterns.len() {
            return Err(Error::contract("corpus: duplicate pattern ids"));
        }
        Ok(())
    }
}

/// One planned utterance: indices, split assignment, and its synthesis seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedUtterance {
    pub speaker_idx: usize,
    pub pattern_idx: usize,
    pub take_idx: usize,
    pub split: Split,
    pub seed: u64,
}

/// Deterministic corpus plan: every (speaker, pattern) cell gets an 8:2-style
/// split with round(train_fraction * n) train takes, shuffled per cell.
pub fn plan_corpus(cfg: &CorpusConfig) -> Result<Vec<PlannedUtterance>> {
    cfg.validate()?;
    let n = cfg.utterances_per_cell;
    let n_train = math::round(cfg.train_fraction * n as f64) as usize;
    let mut plan = Vec::with_capacity(cfg.n_speakers * cfg.patterns.len() * n);
    for spk in 0..cfg.n_speakers {
        for (pat, pattern) in cfg.patterns.iter().enumerate() {
            let mut order: Vec<usize> = (0..n).collect();
            let mut cell_rng = stream(cfg.seed, &format!("split:{spk}:{}", pattern.id));
            order.shuffle(&mut cell_rng);
            let mut split = vec![Split::Test; n];
            for &take in order.iter().take(n_train) {
                split[take] = Split::Train;
            }
            for take in 0..n {
                let seed = derive_seed(cfg.seed, &format!("utt:{spk}:{}:{take}", pattern.id));
                plan.push(PlannedUtterance {
                    speaker_idx: spk,
                    pattern_idx: pat,
                    take_idx: take,
                    split: split[take],
                    seed,
                });
            }
        }
    }
    Ok(plan)
}
