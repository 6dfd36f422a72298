//! MFCC extraction: pre-emphasis, Hamming frames, mel filterbank, log, DCT-II.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

use super::fft::{next_pow2, power_spectrum};

#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    pub sample_rate: u32,
    /// Frame length in samples (25 ms at 16 kHz).
    pub frame_len: usize,
    /// Hop in samples (10 ms at 16 kHz).
    pub hop: usize,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub pre_emphasis: f64,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: 16_000,
            frame_len: 400,
            hop: 160,
            n_mels: 40,
            n_coeffs: 20,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_len == 0 || self.hop == 0 {
            return Err(Error::contract("mfcc: frame and hop must be positive"));
        }
        if self.n_coeffs == 0 || self.n_coeffs > self.n_mels {
            return Err(Error::contract(format!(
                "mfcc: n_coeffs {} must be in 1..={}",
                self.n_coeffs, self.n_mels
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::contract("mfcc: zero sample rate"));
        }
        Ok(())
    }

    /// Number of frames for a signal of `n` samples.
    pub fn frame_count(&self, n: usize) -> Result<usize> {
        if n < self.frame_len {
            return Err(Error::dim(format!(
                "mfcc: signal of {n} samples shorter than one {}-sample frame",
                self.frame_len
            )));
        }
        Ok(1 + (n - self.frame_len) / self.hop)
    }
}

/// Feature rows, one per frame: `[T, n_coeffs]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dim(format!(
                "features: {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    /// `[T, F]` tensor (frames as rows).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols], self.data.clone()).expect("finite by construction")
    }

    /// `[F, T]` tensor (channels as rows), the conv orientation.
    pub fn to_channel_tensor(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for t in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + t] = self.data[t * self.cols + c];
            }
        }
        Tensor::new(vec![self.cols, self.rows], out).expect("finite by construction")
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * math::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (math::powf(10.0, mel / 2595.0) - 1.0)
}

/// Triangular mel filters as dense rows over `n_bins` spectrum bins.
pub fn mel_filterbank(n_mels: usize, n_bins: usize, fft_size: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let f_max = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    // n_mels + 2 evenly spaced mel points from 0 to Nyquist
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft_size as f64;
    let mut bank = vec![vec![0.0; n_bins]; n_mels];
    for m in 0..n_mels {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        for (k, w) in bank[m].iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            if f > lo && f < mid {
                *w = (f - lo) / (mid - lo);
            } else if f >= mid && f < hi {
                *w = (hi - f) / (hi - mid);
            }
        }
    }
    bank
}

/// Orthonormal DCT-II rows: `[n_out, n_in]`.
fn dct_ii_rows(n_out: usize, n_in: usize) -> Vec<f64> {
    let mut rows = vec![0.0; n_out * n_in];
    for k in 0..n_out {
        let scale = if k == 0 {
            math::sqrt(1.0 / n_in as f64)
        } else {
            math::sqrt(2.0 / n_in as f64)
        };
        for n in 0..n_in {
            rows[k * n_in + n] =
                scale * math::cos(math::PI * k as f64 * (2.0 * n as f64 + 1.0) / (2.0 * n_in as f64));
        }
    }
    rows
}

/// Full MFCC pipeline over a mono waveform.
pub fn mfcc(wave: &[f64], cfg: &MfccConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let t_frames = cfg.frame_count(wave.len())?;
    // pre-emphasis; the first sample subtracts itself so a constant signal
    // stays constant across all frames, frame 0 included
    let mut emphasized = Vec::with_capacity(wave.len());
    for (i, &x) in wave.iter().enumerate() {
        let prev = if i == 0 { x } else { wave[i - 1] };
        emphasized.push(x - cfg.pre_emphasis * prev);
    }
    let window: Vec<f64> = (0..cfg.frame_len)
        .map(|n| 0.54 - 0.46 * math::cos(2.0 * math::PI * n as f64 / (cfg.frame_len - 1) as f64))
        .collect();
    let fft_size = next_pow2(cfg.frame_len);
    let n_bins = fft_size / 2 + 1;
    let bank = mel_filterbank(cfg.n_mels, n_bins, fft_size, cfg.sample_rate);
    let dct = dct_ii_rows(cfg.n_coeffs, cfg.n_mels);
    let mut out = vec![0.0; t_frames * cfg.n_coeffs];
    let mut frame = vec![0.0; cfg.frame_len];
    for t in 0..t_frames {
        let start = t * cfg.hop;
        for (f, (&x, &w)) in frame
            .iter_mut()
            .zip(emphasized[start..start + cfg.frame_len].iter().zip(&window))
        {
            *f = x * w;
        }
        let ps = power_spectrum(&frame, fft_size)?;
        let mut logmel = vec![0.0; cfg.n_mels];
        for (lm, filt) in logmel.iter_mut().zip(&bank) {
            let mut e = 0.0;
            for (&w, &p) in filt.iter().zip(&ps) {
                e += w * p;
            }
            *lm = math::ln(e.max(cfg.log_floor));
        }
        for k in 0..cfg.n_coeffs {
            let mut c = 0.0;
            for (n, &lm) in logmel.iter().enumerate() {
                c += dct[k * cfg.n_mels + n] * lm;
            }
            out[t * cfg.n_coeffs + k] = c;
        }
    }
    FeatureMatrix::new(t_frames, cfg.n_coeffs, out)
}
