//! PCM16 mono WAV round-trip for synthesized waveforms.

use std::path::Path;

use anyhow::{bail, Context, Result};

const FULL_SCALE: f64 = 32767.0;

/// Writes samples in [-1, 1] as 16-bit mono PCM; out-of-range values clip.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .with_context(|| format!("creating {}", path.display()))?;
    for &x in samples {
        let q = (x * FULL_SCALE).round().clamp(-FULL_SCALE - 1.0, FULL_SCALE) as i16;
        writer.write_sample(q)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Reads a 16-bit mono PCM WAV back to floats in [-1, 1].
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader =
        hound::WavReader::open(path).with_context(|| format!("opening {}", path.display()))?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        bail!("{}: expected 16-bit mono PCM", path.display());
    }
    let samples: std::result::Result<Vec<i16>, _> = reader.samples::<i16>().collect();
    let wave = samples?.into_iter().map(|s| s as f64 / FULL_SCALE).collect();
    Ok((wave, spec.sample_rate))
}
