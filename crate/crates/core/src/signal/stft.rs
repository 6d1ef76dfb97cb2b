//! Short-time Fourier transform with a periodic Hann window, weighted
//! overlap-add inverse, and magnitude compression.
//!
//! Frames are centered: the signal is padded with `n_fft / 2` zeros on the
//! left, and on the right far enough that every sample is covered by a full
//! frame. Bins `0..=n_fft / 2` are kept.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};
use crate::state::{Shape, StateVector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectroConfig {
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for SpectroConfig {
    fn default() -> Self {
        Self {
            window: 510,
            hop: 128,
            n_fft: 510,
            alpha: 0.5,
            beta: 0.15,
        }
    }
}

fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

impl SpectroConfig {
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Checks sizes and that the squared window summed over hops never
    /// vanishes, which is what the overlap-add inverse divides by.
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.window || self.window > self.n_fft {
            return Err(Error::ColaViolation(format!(
                "need 0 < hop <= window <= n_fft, got hop {}, window {}, n_fft {}",
                self.hop, self.window, self.n_fft
            )));
        }
        let w = self.padded_window();
        let min = (0..self.hop)
            .map(|r| {
                w.iter()
                    .skip(r)
                    .step_by(self.hop)
                    .map(|v| v * v)
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        if !(min > 1e-8) {
            return Err(Error::ColaViolation(format!(
                "overlap-added window power drops to {min:e} for hop {}",
                self.hop
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) || !(self.beta > 0.0) {
            return Err(Error::config(format!(
                "compression needs 0 < alpha <= 1 and beta > 0, got {} and {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    /// Hann window of `window` samples centered in `n_fft` zeros.
    fn padded_window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_fft];
        let start = (self.n_fft - self.window) / 2;
        w[start..start + self.window].copy_from_slice(&hann(self.window));
        w
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        1 + num_samples.div_ceil(self.hop)
    }
}

struct Plan {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Plan {
    fn new(cfg: &SpectroConfig, inverse: bool) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        let fft = if inverse {
            planner.plan_fft_inverse(cfg.n_fft)
        } else {
            planner.plan_fft_forward(cfg.n_fft)
        };
        Ok(Self {
            window: cfg.padded_window(),
            fft,
        })
    }
}

pub fn stft(wav: &Waveform, cfg: &SpectroConfig) -> Result<StateVector> {
    let plan = Plan::new(cfg, false)?;
    let (n_fft, hop, bins) = (cfg.n_fft, cfg.hop, cfg.bins());
    let frames = cfg.num_frames(wav.len());
    let pad = n_fft / 2;
    let mut padded = vec![0.0; (frames - 1) * hop + n_fft];
    padded[pad..pad + wav.len()].copy_from_slice(wav.samples());

    let mut data = Vec::with_capacity(2 * frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for k in 0..frames {
        let seg = &padded[k * hop..k * hop + n_fft];
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&plan.window) {
            *b = Complex64::new(s * w, 0.0);
        }
        plan.fft.process(&mut buf);
        for c in &buf[..bins] {
            data.push(c.re);
            data.push(c.im);
        }
    }
    StateVector::new(Shape::Spectrogram { frames, bins }, data)
}

/// Weighted overlap-add inverse of [`stft`], trimmed to `num_samples`.
pub fn istft(
    spec: &StateVector,
    cfg: &SpectroConfig,
    num_samples: usize,
    sample_rate: u32,
) -> Result<Waveform> {
    let plan = Plan::new(cfg, true)?;
    let (n_fft, hop, bins) = (cfg.n_fft, cfg.hop, cfg.bins());
    let frames = match spec.shape() {
        Shape::Spectrogram { frames, bins: b } if b == bins => frames,
        other => {
            return Err(Error::shape(
                format!("spectrogram with {bins} bins"),
                other.to_string(),
            ))
        }
    };
    if frames != cfg.num_frames(num_samples) {
        return Err(Error::shape(
            format!("{} frames", cfg.num_frames(num_samples)),
            format!("{frames} frames"),
        ));
    }
    let total = (frames - 1) * hop + n_fft;
    let mut acc = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let scale = 1.0 / n_fft as f64;
    let data = spec.as_slice();
    for k in 0..frames {
        let frame = &data[2 * k * bins..2 * (k + 1) * bins];
        for f in 0..bins {
            buf[f] = Complex64::new(frame[2 * f], frame[2 * f + 1]);
        }
        // Hermitian completion; the Nyquist and DC imaginary parts drop out.
        for f in bins..n_fft {
            buf[f] = buf[n_fft - f].conj();
        }
        plan.fft.process(&mut buf);
        for (n, (b, &w)) in buf.iter().zip(&plan.window).enumerate() {
            acc[k * hop + n] += b.re * scale * w;
            norm[k * hop + n] += w * w;
        }
    }
    let pad = n_fft / 2;
    let samples = (pad..pad + num_samples).map(|i| acc[i] / norm[i]).collect();
    Waveform::new(samples, sample_rate)
}

/// Maps every complex bin `c` to `beta |c|^alpha e^{i arg c}`.
pub fn compress(spec: &StateVector, cfg: &SpectroConfig) -> StateVector {
    remap_magnitude(spec, |m| cfg.beta * m.powf(cfg.alpha))
}

/// Exact inverse of [`compress`].
pub fn expand(spec: &StateVector, cfg: &SpectroConfig) -> StateVector {
    remap_magnitude(spec, |m| (m / cfg.beta).powf(1.0 / cfg.alpha))
}

fn remap_magnitude(spec: &StateVector, f: impl Fn(f64) -> f64) -> StateVector {
    let mut out = spec.clone();
    for pair in out.as_mut_slice().chunks_exact_mut(2) {
        let mag = pair[0].hypot(pair[1]);
        if mag > 0.0 {
            let gain = f(mag) / mag;
            pair[0] *= gain;
            pair[1] *= gain;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn white(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Waveform::new(s, 16_000).unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn round_trip_on_white_noise() {
        let cfg = SpectroConfig::default();
        for n in [1000, 4096, 16_000] {
            let w = white(n, n as u64);
            let spec = stft(&w, &cfg).unwrap();
            let back = istft(&spec, &cfg, n, 16_000).unwrap();
            assert!(rel_err(back.samples(), w.samples()) < 1e-10);
        }
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let w = Waveform::new(vec![0.0; 2000], 16_000).unwrap();
        let spec = stft(&w, &SpectroConfig::default()).unwrap();
        assert!(spec.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_centered_sinusoid_stays_in_its_bin() {
        let cfg = SpectroConfig::default();
        let bin = 40;
        let n = 8000;
        let s = (0..n)
            .map(|i| (2.0 * PI * bin as f64 * i as f64 / cfg.n_fft as f64).cos())
            .collect();
        let spec = stft(&Waveform::new(s, 16_000).unwrap(), &cfg).unwrap();
        let bins = cfg.bins();
        let k = spec.shape().len() / (2 * bins) / 2;
        let frame = &spec.as_slice()[2 * k * bins..2 * (k + 1) * bins];
        let energy = |f: usize| frame[2 * f].powi(2) + frame[2 * f + 1].powi(2);
        let total: f64 = (0..bins).map(energy).sum();
        // A periodic Hann window leaks into the two neighbours only.
        assert!(energy(bin) / total > 0.6);
        assert!((energy(bin - 1) + energy(bin) + energy(bin + 1)) / total > 0.95);
    }

    #[test]
    fn invalid_pairings_are_rejected() {
        let hop_equal_window = SpectroConfig {
            hop: 510,
            ..SpectroConfig::default()
        };
        assert!(matches!(
            hop_equal_window.validate(),
            Err(Error::ColaViolation(_))
        ));
        let window_too_long = SpectroConfig {
            window: 600,
            ..SpectroConfig::default()
        };
        assert!(window_too_long.validate().is_err());
    }

    #[test]
    fn compression_examples() {
        let cfg = SpectroConfig::default();
        let spec = StateVector::new(
            Shape::Spectrogram { frames: 1, bins: 2 },
            vec![4.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let c = compress(&spec, &cfg);
        assert!((c.as_slice()[0] - 0.3).abs() < 1e-15);
        assert_eq!(&c.as_slice()[1..], &[0.0, 0.0, 0.0]);
        let identity = SpectroConfig {
            alpha: 1.0,
            beta: 1.0,
            ..cfg
        };
        assert_eq!(compress(&spec, &identity), spec);
    }

    #[test]
    fn compression_round_trip() {
        let cfg = SpectroConfig::default();
        let w = white(3000, 9);
        let spec = stft(&w, &cfg).unwrap();
        let back = expand(&compress(&spec, &cfg), &cfg);
        assert!(rel_err(back.as_slice(), spec.as_slice()) < 1e-12);
    }
}
