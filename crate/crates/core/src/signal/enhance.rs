//! Waveform-level enhancement: loudness normalization, STFT, compression,
//! solving in the compressed domain, and the inverse chain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::metrics::si_sdr;
use super::stft::{compress, expand, istft, stft, SpectroConfig};
use super::Waveform;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::model::{FieldModel, Mode};
use crate::sde::{FieldFromScore, ScoreFromField};
use crate::solvers::{Inference, Sampler};
use crate::state::{Shape, StateVector};
use crate::training::{Checkpoint, Pair, TrainConfig, Validator};

/// Gain that brings `noisy` to unit RMS (1 for silence).
pub fn normalization_gain(noisy: &Waveform) -> f64 {
    let rms = noisy.rms();
    if rms > 0.0 {
        1.0 / rms
    } else {
        1.0
    }
}

/// `compress(stft(gain * wav))`.
pub fn analyze(wav: &Waveform, cfg: &SpectroConfig, gain: f64) -> Result<StateVector> {
    Ok(compress(&stft(&wav.scaled(gain), cfg)?, cfg))
}

/// Inverse of [`analyze`] for a signal of `num_samples` samples.
pub fn synthesize(
    spec: &StateVector,
    cfg: &SpectroConfig,
    num_samples: usize,
    sample_rate: u32,
    gain: f64,
) -> Result<Waveform> {
    Ok(istft(&expand(spec, cfg), cfg, num_samples, sample_rate)?.scaled(1.0 / gain))
}

/// Compressed spectrograms of a `(clean, noisy)` pair, both normalized by the
/// noisy signal's RMS.
pub fn prepare_pair(clean: &Waveform, noisy: &Waveform, cfg: &SpectroConfig) -> Result<Pair> {
    if clean.len() != noisy.len() {
        return Err(Error::shape(
            format!("{} samples", noisy.len()),
            format!("{} samples", clean.len()),
        ));
    }
    let gain = normalization_gain(noisy);
    Ok((analyze(clean, cfg, gain)?, analyze(noisy, cfg, gain)?))
}

/// Splits a spectrogram into consecutive pieces of `frames` frames; a shorter
/// remainder is dropped unless it is the only piece.
pub fn chunk(spec: &StateVector, frames: usize) -> Result<Vec<StateVector>> {
    let (total, bins) = match spec.shape() {
        Shape::Spectrogram { frames, bins } => (frames, bins),
        other => return Err(Error::shape("spectrogram", other.to_string())),
    };
    if frames == 0 {
        return Err(Error::config("chunk length must be positive"));
    }
    if total <= frames {
        return Ok(vec![spec.clone()]);
    }
    let step = 2 * bins * frames;
    spec.as_slice()
        .chunks_exact(step)
        .map(|c| StateVector::new(Shape::Spectrogram { frames, bins }, c.to_vec()))
        .collect()
}

/// Chunks both sides of a pair in lockstep.
pub fn chunk_pair(pair: &Pair, frames: usize) -> Result<Vec<Pair>> {
    pair.0.ensure_same_shape(&pair.1)?;
    Ok(chunk(&pair.0, frames)?
        .into_iter()
        .zip(chunk(&pair.1, frames)?)
        .collect())
}

/// Enhances `noisy` with `field` (a vector field or score, matching the
/// sampler in `inference`).
pub fn enhance<F: Field + ?Sized, R: Rng + ?Sized>(
    field: &F,
    inference: &Inference,
    noisy: &Waveform,
    cfg: &SpectroConfig,
    rng: &mut R,
) -> Result<Waveform> {
    let gain = normalization_gain(noisy);
    let y = analyze(noisy, cfg, gain)?;
    let x = inference.run(field, &y, rng)?;
    synthesize(&x, cfg, noisy.len(), noisy.sample_rate(), gain)
}

fn fits(mode: Mode, sampler: Sampler) -> bool {
    match mode {
        Mode::VectorField => !sampler.needs_score(),
        Mode::Score { .. } => sampler.needs_score(),
    }
}

/// Inference settings for a checkpoint; fails if the model's output mode does
/// not fit the sampler.
pub fn checkpoint_inference(ckpt: &Checkpoint, sampler: Sampler, nfe: usize) -> Result<Inference> {
    if !fits(ckpt.mode, sampler) {
        return Err(Error::config(format!(
            "a {:?} checkpoint cannot drive the {} sampler",
            ckpt.mode,
            sampler.name()
        )));
    }
    Ok(bridged_inference(ckpt, sampler, nfe))
}

/// Inference settings for any sampler; pair with [`enhance_bridged`].
pub fn bridged_inference(ckpt: &Checkpoint, sampler: Sampler, nfe: usize) -> Inference {
    let c = &ckpt.config;
    Inference {
        sampler,
        nfe,
        path: c.path,
        sde: c.sde,
        t_delta: c.t_delta,
        t_rsp: c.t_rsp,
    }
}

/// Like [`enhance`], but a model whose output mode does not suit the sampler
/// is converted through the exact field/score bridge of the flow-equivalent
/// SDE. A score model driving the FM sampler is evaluated at `t_delta` in
/// place of `t = 0`.
pub fn enhance_bridged<R: Rng + ?Sized>(
    model: &FieldModel,
    inference: &Inference,
    noisy: &Waveform,
    cfg: &SpectroConfig,
    rng: &mut R,
) -> Result<Waveform> {
    let sde = inference.sde;
    match model.mode() {
        mode if fits(mode, inference.sampler) => enhance(model, inference, noisy, cfg, rng),
        Mode::VectorField => {
            let score = ScoreFromField { sde, field: model };
            enhance(&score, inference, noisy, cfg, rng)
        }
        Mode::Score { .. } => {
            // The bridge is singular at t = 0 (diffusion time 1); start where
            // the reverse samplers do.
            let field = FieldFromScore { sde, score: model };
            let t_min = inference.t_delta;
            let clamped = |x: &StateVector, y: &StateVector, t: f64| field.eval(x, y, t.max(t_min));
            enhance(&clamped, inference, noisy, cfg, rng)
        }
    }
}

/// Validation on whole waveforms: mean SI-SDR of the enhanced signals.
#[derive(Clone, Debug)]
pub struct WaveformValidator {
    /// `(clean, noisy)` pairs.
    pub items: Vec<(Waveform, Waveform)>,
    pub spectro: SpectroConfig,
    pub seed: u64,
}

impl Validator for WaveformValidator {
    fn validate(&self, model: &FieldModel, config: &TrainConfig) -> Result<f64> {
        if self.items.is_empty() {
            return Err(Error::config("validation set is empty"));
        }
        let inference = config.inference(config.validation_nfe);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut total = 0.0;
        for (clean, noisy) in &self.items {
            let est = enhance(model, &inference, noisy, &self.spectro, &mut rng)?;
            total += si_sdr(est.samples(), clean.samples())?;
        }
        Ok(total / self.items.len() as f64)
    }
}
