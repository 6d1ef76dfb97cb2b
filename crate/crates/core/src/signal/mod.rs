//! Time-domain signals: synthetic clean/noise generation, SNR mixing, the
//! STFT front end, SI-SDR metrics, WAV I/O and the enhancement pipeline.

pub mod enhance;
pub mod metrics;
pub mod stft;
pub mod wav;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("waveform samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            (self.energy() / self.samples.len() as f64).sqrt()
        }
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn ensure_compatible(&self, other: &Waveform) -> Result<()> {
        if self.len() != other.len() || self.sample_rate != other.sample_rate {
            return Err(Error::shape(
                format!("{} samples at {} Hz", self.len(), self.sample_rate),
                format!("{} samples at {} Hz", other.len(), other.sample_rate),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Waveform) -> Result<Waveform> {
        self.ensure_compatible(other)?;
        Ok(Waveform {
            samples: self
                .samples
                .iter()
                .zip(&other.samples)
                .map(|(a, b)| a + b)
                .collect(),
            sample_rate: self.sample_rate,
        })
    }
}

/// Length and rate of synthetic utterances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub num_samples: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            num_samples: 16_000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.num_samples == 0 {
            return Err(Error::config(
                "synthetic signals need a positive rate and length",
            ));
        }
        Ok(())
    }
}

fn normalize_rms(mut samples: Vec<f64>) -> Vec<f64> {
    let rms = (samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64).sqrt();
    if rms > 0.0 {
        for v in &mut samples {
            *v /= rms;
        }
    }
    samples
}

/// Harmonic stand-in for voiced speech: 3 to 8 harmonics of a fundamental in
/// [80, 300] Hz, each with its own slowly varying amplitude envelope, scaled
/// to unit RMS.
pub fn synth_clean<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<Waveform> {
    cfg.validate()?;
    let fs = cfg.sample_rate as f64;
    let f0 = rng.random_range(80.0..=300.0);
    let harmonics = rng.random_range(3..=8usize);
    let nyquist = fs / 2.0;
    let mut samples = vec![0.0; cfg.num_samples];
    for k in 1..=harmonics {
        let freq = f0 * k as f64;
        if freq >= nyquist {
            break;
        }
        let amp = rng.random_range(0.3..=1.0) / k as f64;
        let phase = rng.random_range(0.0..2.0 * PI);
        let env_rate = rng.random_range(1.0..=5.0);
        let env_phase = rng.random_range(0.0..2.0 * PI);
        let env_depth = rng.random_range(0.2..=0.9);
        for (n, s) in samples.iter_mut().enumerate() {
            let t = n as f64 / fs;
            let env = 1.0 - env_depth * 0.5 * (1.0 + (2.0 * PI * env_rate * t + env_phase).sin());
            *s += amp * env * (2.0 * PI * freq * t + phase).sin();
        }
    }
    Waveform::new(normalize_rms(samples), cfg.sample_rate)
}

/// White Gaussian noise through a one-pole filter `y[n] = x[n] + a y[n-1]`
/// with random `a` in [-0.9, 0.9], so the spectral tilt varies from
/// high-pass to low-pass; unit RMS.
pub fn synth_noise<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Result<Waveform> {
    cfg.validate()?;
    let a = rng.random_range(-0.9..=0.9);
    let mut prev = 0.0;
    let samples = (0..cfg.num_samples)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            prev = x + a * prev;
            prev
        })
        .collect();
    Waveform::new(normalize_rms(samples), cfg.sample_rate)
}

/// Returns `clean + g * noise` with `g` chosen so the mixture has exactly
/// `snr_db` between the clean and scaled noise energies.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    clean.ensure_compatible(noise)?;
    let en = noise.energy();
    if !(en > 0.0) {
        return Err(Error::config("noise has zero energy"));
    }
    let gain = (clean.energy() / (en * 10f64.powf(snr_db / 10.0))).sqrt();
    clean.add(&noise.scaled(gain))
}

/// Noise-only component `noisy - clean`.
pub fn residual(noisy: &Waveform, clean: &Waveform) -> Result<Waveform> {
    noisy.add(&clean.scaled(-1.0))
}
