//! Losses, the Adam training loop with EMA tracking, and checkpoints.

mod checkpoint;
mod losses;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use losses::{
    cfm_items, cfm_loss, crp_finetune_step, crp_loss, dsm_items, dsm_loss, regression_loss,
    CrpSettings, DsmWeighting, Pair,
};

use crate::error::{Error, Result};
use crate::model::{EmaState, FieldModel, Mode};
use crate::paths::PathSpec;
use crate::sde::SdeSpec;
use crate::signal::metrics::si_sdr;
use crate::solvers::{Inference, Sampler, DEFAULT_T_DELTA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Cfm,
    Dsm,
    Crp,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Cfm => "cfm",
            Objective::Dsm => "dsm",
            Objective::Crp => "crp",
        }
    }

    /// Sampler used for validation of a model trained with this objective.
    pub fn sampler(&self) -> Sampler {
        match self {
            Objective::Cfm => Sampler::Fm,
            Objective::Dsm => Sampler::PfOde,
            Objective::Crp => Sampler::Eum,
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cfm" => Ok(Objective::Cfm),
            "dsm" => Ok(Objective::Dsm),
            "crp" => Ok(Objective::Crp),
            other => Err(Error::config(format!(
                "unknown objective {other:?} (expected cfm, dsm or crp)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub path: PathSpec,
    pub sde: SdeSpec,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Defaults to one pass over the training pairs.
    pub steps_per_epoch: Option<usize>,
    pub t_delta: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub n_rev: usize,
    pub t_rsp: f64,
    pub crp_full_backprop: bool,
    pub dsm_weighting: DsmWeighting,
    pub validation_nfe: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Cfm,
            path: PathSpec::default(),
            sde: SdeSpec::default(),
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 10,
            steps_per_epoch: None,
            t_delta: DEFAULT_T_DELTA,
            ema_decay: 0.999,
            seed: 0,
            n_rev: 5,
            t_rsp: 1.0 - DEFAULT_T_DELTA,
            crp_full_backprop: false,
            dsm_weighting: DsmWeighting::Unweighted,
            validation_nfe: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.path.validate()?;
        self.sde.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.epochs == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::config("training needs at least one step"));
        }
        if !(self.t_delta > 0.0 && self.t_delta < 0.5) {
            return Err(Error::config("t_delta must lie in (0, 0.5)"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("EMA decay must lie in [0, 1]"));
        }
        if self.n_rev == 0 || self.validation_nfe == 0 {
            return Err(Error::config("step counts must be at least 1"));
        }
        if !(self.t_rsp > self.t_delta && self.t_rsp < 1.0) {
            return Err(Error::config("t_rsp must lie in (t_delta, 1)"));
        }
        Ok(())
    }

    /// Output mode expected of a model trained with this configuration.
    pub fn mode(&self) -> Mode {
        match self.objective {
            Objective::Cfm => Mode::VectorField,
            Objective::Dsm | Objective::Crp => Mode::Score {
                sigma: self.sde_sigma(),
            },
        }
    }

    fn sde_sigma(&self) -> f64 {
        match self.sde {
            SdeSpec::FlowEquivalent { sigma } => sigma,
            SdeSpec::Bbed { c, .. } => c,
        }
    }

    pub fn crp_settings(&self) -> CrpSettings {
        CrpSettings {
            n_rev: self.n_rev,
            t_rsp: self.t_rsp,
            t_delta: self.t_delta,
            full_backprop: self.crp_full_backprop,
        }
    }

    /// Inference settings used for validation.
    pub fn inference(&self, nfe: usize) -> Inference {
        Inference {
            sampler: self.objective.sampler(),
            nfe,
            path: self.path,
            sde: self.sde,
            t_delta: self.t_delta,
            t_rsp: self.t_rsp,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.steps = self.steps.saturating_add(1);
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Scores a model on held-out data; larger is better.
pub trait Validator {
    fn validate(&self, model: &FieldModel, config: &TrainConfig) -> Result<f64>;
}

/// Mean SI-SDR of enhanced states against clean states, treating each
/// state vector as a signal.
#[derive(Clone, Debug)]
pub struct PairValidator {
    pub pairs: Vec<Pair>,
    pub seed: u64,
}

impl Validator for PairValidator {
    fn validate(&self, model: &FieldModel, config: &TrainConfig) -> Result<f64> {
        if self.pairs.is_empty() {
            return Err(Error::config("validation set is empty"));
        }
        let inference = config.inference(config.validation_nfe);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut total = 0.0;
        for (clean, noisy) in &self.pairs {
            let est = inference.run(model, noisy, &mut rng)?;
            total += si_sdr(est.as_slice(), clean.as_slice())?;
        }
        Ok(total / self.pairs.len() as f64)
    }
}

/// One optimizer step. `validation` is filled on the last step of each
/// epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub validation: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Optimizes `init` on `data` with the configured objective.
///
/// Validation runs on the EMA parameters after every epoch; the returned
/// `best` checkpoint is the one with the highest validation score.
pub fn train<V: Validator + ?Sized>(
    config: &TrainConfig,
    init: FieldModel,
    data: &[Pair],
    validator: &V,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if init.mode() != config.mode() {
        return Err(Error::config(format!(
            "model mode {:?} does not fit the {} objective",
            init.mode(),
            config.objective.name()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = init;
    let mut ema = EmaState::new(model.params(), config.ema_decay)?;
    let mut adam = Adam::new(model.num_params(), config.learning_rate);
    let steps_per_epoch = config
        .steps_per_epoch
        .unwrap_or_else(|| data.len().div_ceil(config.batch_size));
    let crp = config.crp_settings();

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step: u64 = 0;
    let mut log: Vec<LogRow> = Vec::with_capacity(config.epochs * steps_per_epoch);
    let mut best: Option<Checkpoint> = None;
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut cursor = 0;
        for k in 0..steps_per_epoch {
            batch.clear();
            for _ in 0..config.batch_size {
                batch.push(data[order[cursor % order.len()]].clone());
                cursor += 1;
            }
            let result = match config.objective {
                Objective::Cfm => {
                    let items = cfm_items(&batch, &config.path, config.t_delta, &mut rng)?;
                    model.loss_grad(&items)
                }
                Objective::Dsm => {
                    let items = dsm_items(
                        &batch,
                        &config.sde,
                        config.t_delta,
                        config.dsm_weighting,
                        &mut rng,
                    )?;
                    model.loss_grad(&items)
                }
                Objective::Crp => crp_finetune_step(&model, &batch, &config.sde, &crp, &mut rng),
            };
            let (loss, grad) = match result {
                Ok((loss, grad)) if loss.is_finite() && grad.iter().all(|g| g.is_finite()) => {
                    (loss, grad)
                }
                Ok(_) | Err(Error::NonFiniteValue(_)) | Err(Error::NonFinite { .. }) => {
                    let last_good = Checkpoint::new(&model, &ema, config.clone(), step, None);
                    return Err(Error::Diverged {
                        step,
                        last_good: Box::new(last_good),
                    });
                }
                Err(e) => return Err(e),
            };
            adam.step(model.params_mut(), &grad);
            ema.update(model.params())?;
            step += 1;
            let mut row = LogRow {
                step,
                epoch,
                loss,
                validation: None,
            };
            if k + 1 < steps_per_epoch {
                on_row(&row);
                log.push(row);
                continue;
            }
            let validation = validator.validate(&model.with_params(&ema.shadow)?, config)?;
            row.validation = Some(validation);
            on_row(&row);
            log.push(row);
            let score = validation.is_finite().then_some(validation);
            let better = match (&best, score) {
                (None, _) => true,
                (Some(b), Some(v)) => b.validation.is_none_or(|bv| v > bv),
                (Some(_), None) => false,
            };
            if better {
                best = Some(Checkpoint::new(&model, &ema, config.clone(), step, score));
            }
        }
    }
    let last_validation = log
        .last()
        .and_then(|r| r.validation)
        .filter(|v| v.is_finite());
    let last = Checkpoint::new(&model, &ema, config.clone(), step, last_validation);
    Ok(TrainOutcome {
        best: best.expect("at least one epoch ran"),
        last,
        log,
    })
}
