//! Waveform synthesis: harmonic tones, silence, speed perturbation.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Harmonic tone with raised-cosine attack and decay ramps (10 ms each).
///
/// `harmonics` holds relative amplitudes for partials 1..=len at multiples of
/// `f0`; the result is scaled so its peak envelope is `amp`.
pub fn harmonic_tone(
    f0: f64,
    harmonics: &[f64],
    n_samples: usize,
    amp: f64,
    sample_rate: u32,
) -> Result<Vec<f64>> {
    if f0 <= 0.0 || !f0.is_finite() {
        return Err(Error::contract("harmonic_tone: f0 must be positive"));
    }
    if harmonics.is_empty() {
        return Err(Error::contract("harmonic_tone: empty harmonic profile"));
    }
    let norm: f64 = harmonics.iter().map(|h| h.abs()).sum();
    if norm <= 0.0 {
        return Err(Error::contract("harmonic_tone: all-zero harmonic profile"));
    }
    let sr = sample_rate as f64;
    let ramp = ((0.010 * sr) as usize).min(n_samples / 2);
    let mut out = vec![0.0; n_samples];
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let mut s = 0.0;
        for (h, &a) in harmonics.iter().enumerate() {
            let f = f0 * (h + 1) as f64;
            if f < sr / 2.0 {
                s += a * math::sin(2.0 * math::PI * f * t);
            }
        }
        let env = envelope(i, n_samples, ramp);
        *o = amp * env * s / norm;
    }
    Ok(out)
}

fn envelope(i: usize, n: usize, ramp: usize) -> f64 {
    if ramp == 0 {
        return 1.0;
    }
    if i < ramp {
        0.5 * (1.0 - math::cos(math::PI * i as f64 / ramp as f64))
    } else if i >= n - ramp {
        let j = n - 1 - i;
        0.5 * (1.0 - math::cos(math::PI * j as f64 / ramp as f64))
    } else {
        1.0
    }
}

pub fn silence(n_samples: usize) -> Vec<f64> {
    vec![0.0; n_samples]
}

/// Resample by linear interpolation so the output plays `factor` times faster.
///
/// Output length is `round(n / factor)`; factor 1.1 shortens, 0.9 lengthens.
pub fn speed_perturb(wave: &[f64], factor: f64) -> Result<Vec<f64>> {
    if factor <= 0.0 || !factor.is_finite() {
        return Err(Error::contract("speed_perturb: factor must be positive"));
    }
    if wave.is_empty() {
        return Ok(Vec::new());
    }
    let out_len = math::round(wave.len() as f64 / factor) as usize;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * factor;
        let lo = math::floor(pos) as usize;
        if lo + 1 >= wave.len() {
            out.push(wave[wave.len() - 1]);
        } else {
            let frac = pos - lo as f64;
            out.push(wave[lo] * (1.0 - frac) + wave[lo + 1] * frac);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::fft::power_spectrum;

    #[test]
    fn tone_respects_length_and_amplitude() {
        let w = harmonic_tone(220.0, &[1.0, 0.5], 1600, 0.3, 16_000).unwrap();
        assert_eq!(w.len(), 1600);
        let peak = w.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(peak <= 0.3 + 1e-12);
        assert!(peak > 0.15, "tone unexpectedly quiet: {peak}");
    }

    #[test]
    fn ramps_start_and_end_at_zero() {
        let w = harmonic_tone(300.0, &[1.0], 3200, 0.5, 16_000).unwrap();
        assert_eq!(w[0], 0.0);
        assert!(w[3199].abs() < 1e-6);
        // mid-tone should be live
        assert!(w[1600].abs() + w[1601].abs() > 1e-3);
    }

    #[test]
    fn harmonics_above_nyquist_are_dropped() {
        // second partial of 5 kHz is 10 kHz > 8 kHz Nyquist, so only the
        // fundamental sounds; the profile norm still counts both entries
        let with = harmonic_tone(5000.0, &[1.0, 1.0], 800, 0.4, 16_000).unwrap();
        let without = harmonic_tone(5000.0, &[1.0], 800, 0.4, 16_000).unwrap();
        for (a, b) in with.iter().zip(&without) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn silence_is_zero() {
        let s = silence(123);
        assert_eq!(s.len(), 123);
        assert!(s.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn perturb_length_formula() {
        assert_eq!(speed_perturb(&vec![0.0; 900], 0.9).unwrap().len(), 1000);
        assert_eq!(speed_perturb(&vec![0.0; 1000], 1.1).unwrap().len(), 909);
        assert_eq!(speed_perturb(&vec![0.0; 1000], 1.0).unwrap().len(), 1000);
        assert!(speed_perturb(&[0.0], 0.0).is_err());
    }

    #[test]
    fn identity_factor_preserves_samples() {
        let w: Vec<f64> = (0..64).map(|i| math::sin(0.1 * i as f64)).collect();
        let p = speed_perturb(&w, 1.0).unwrap();
        for (a, b) in w.iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn perturb_shifts_pitch() {
        // 440 Hz sped up by 1.1 should land near 484 Hz
        let sr = 16_000u32;
        let n = 8192;
        let w: Vec<f64> = (0..n)
            .map(|i| math::sin(2.0 * math::PI * 440.0 * i as f64 / sr as f64))
            .collect();
        let p = speed_perturb(&w, 1.1).unwrap();
        let fft_size = 4096;
        let ps = power_spectrum(&p[..fft_size], fft_size).unwrap();
        let peak_bin = ps
            .iter()
            .enumerate()
            .skip(1)
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let peak_hz = peak_bin as f64 * sr as f64 / fft_size as f64;
        assert!(
            (peak_hz - 484.0).abs() / 484.0 < 0.02,
            "peak at {peak_hz} Hz, expected about 484"
        );
    }
}
