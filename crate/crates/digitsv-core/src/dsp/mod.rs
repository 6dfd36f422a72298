//! Signal-processing front end: FFT, MFCC features, tone synthesis helpers
//! and speed perturbation.

mod fft;
mod mfcc;
mod synth;

pub use fft::{fft_in_place, next_pow2, power_spectrum};
pub use mfcc::{hz_to_mel, mel_filterbank, mel_to_hz, mfcc, FeatureMatrix, MfccConfig};
pub use synth::{harmonic_tone, speed_perturb, silence};
