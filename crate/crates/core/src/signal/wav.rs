//! Mono 16-bit PCM WAV files. Samples are scaled so that full scale is 1.0.

use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

const FULL_SCALE: f64 = 32768.0;

fn spec(sample_rate: u32) -> hound::WavSpec {
    hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    }
}

/// Quantizes to 16 bits; samples beyond full scale are clipped.
pub fn write_wav(path: &Path, wav: &Waveform) -> Result<()> {
    let mut writer = hound::WavWriter::create(path, spec(wav.sample_rate()))?;
    for &s in wav.samples() {
        let q = (s * FULL_SCALE)
            .round()
            .clamp(-FULL_SCALE, FULL_SCALE - 1.0);
        writer.write_sample(q as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let s = reader.spec();
    if s.channels != 1 || s.bits_per_sample != 16 || s.sample_format != hound::SampleFormat::Int {
        return Err(Error::config(format!(
            "{}: expected mono 16-bit PCM, found {} channel(s), {} bits",
            path.display(),
            s.channels,
            s.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|v| v.map(|v| v as f64 / FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, s.sample_rate)
}

/// Gain that brings the loudest of `waves` to `peak`; the same gain applied to
/// every signal keeps their relative levels (and hence SNRs) intact.
pub fn joint_gain(waves: &[&Waveform], peak: f64) -> f64 {
    let max = waves.iter().map(|w| w.peak()).fold(0.0, f64::max);
    if max > 0.0 {
        peak / max
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_on_the_quantization_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f64> = [-32768, -1, 0, 1, 12345, 32767]
            .iter()
            .map(|&q| q as f64 / FULL_SCALE)
            .collect();
        let w = Waveform::new(samples, 8000).unwrap();
        write_wav(&path, &w).unwrap();
        assert_eq!(read_wav(&path).unwrap(), w);
    }

    #[test]
    fn joint_gain_normalizes_loudest() {
        let a = Waveform::new(vec![0.5, -2.0], 8000).unwrap();
        let b = Waveform::new(vec![1.0, 0.0], 8000).unwrap();
        assert_eq!(joint_gain(&[&a, &b], 0.9), 0.45);
    }
}
