//! Conditional flow matching, denoising score matching and correcting the
//! reverse process (CRP).
//!
//! CFM and DSM are plain regressions, so they are expressed as batches of
//! [`RegressionItem`]s: the same items feed the loss of an arbitrary
//! [`Field`] (handy for analytic stubs) and the exact gradient of a
//! [`FieldModel`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::model::{FieldModel, RegressionItem};
use crate::paths::{cond_vector_field, sample_conditional, PathSpec};
use crate::sde::{self, SdeSpec, DEFAULT_MOMENT_STEPS};
use crate::solvers::{euler_maruyama_reverse_from, make_reverse_grid, sample_around};
use crate::state::StateVector;

/// `(clean, noisy)`.
pub type Pair = (StateVector, StateVector);

/// Per-sample weight of the DSM regression.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DsmWeighting {
    #[default]
    Unweighted,
    /// Multiply each term by the kernel variance, which puts all diffusion
    /// times on the same scale.
    Variance,
    /// Multiply by `g(t)^4 / 4`. Through the score-to-field bridge this makes
    /// the score error equal the field error, so the loss matches CFM.
    FlowMatching,
}

fn check_pairs(pairs: &[Pair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::config("a loss needs at least one pair"));
    }
    Ok(())
}

fn check_t_delta(t_delta: f64) -> Result<()> {
    if t_delta > 0.0 && t_delta < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!(
            "t_delta must lie in (0, 1), got {t_delta}"
        )))
    }
}

/// One CFM regression item per pair: `t ~ U[0, 1 - t_delta]`,
/// `x_t ~ p_t(x | x1, y)` and target `v_t(x_t | x1, y)`.
pub fn cfm_items<R: Rng + ?Sized>(
    pairs: &[Pair],
    path: &PathSpec,
    t_delta: f64,
    rng: &mut R,
) -> Result<Vec<RegressionItem>> {
    check_pairs(pairs)?;
    check_t_delta(t_delta)?;
    pairs
        .iter()
        .map(|(x1, y)| {
            let t = rng.random_range(0.0..=1.0 - t_delta);
            let x = sample_conditional(path, x1, y, t, rng)?;
            let target = cond_vector_field(path, &x, x1, y, t)?;
            Ok(RegressionItem {
                x,
                y: y.clone(),
                t,
                target,
                weight: 1.0,
            })
        })
        .collect()
}

/// One DSM regression item per pair: diffusion time `t ~ U[t_delta,
/// 1 - t_delta]`, `x_t` from the perturbation kernel and the kernel score as
/// target.
pub fn dsm_items<R: Rng + ?Sized>(
    pairs: &[Pair],
    sde: &SdeSpec,
    t_delta: f64,
    weighting: DsmWeighting,
    rng: &mut R,
) -> Result<Vec<RegressionItem>> {
    check_pairs(pairs)?;
    if !(t_delta > 0.0 && t_delta <= 0.5) {
        return Err(Error::config(format!(
            "t_delta must lie in (0, 0.5], got {t_delta}"
        )));
    }
    pairs
        .iter()
        .map(|(x0, y)| {
            let t = rng.random_range(t_delta..=1.0 - t_delta);
            let kernel = match *sde {
                SdeSpec::FlowEquivalent { sigma } => sde::flow_equivalent_kernel(sigma, x0, y, t)?,
                SdeSpec::Bbed { .. } => sde::kernel_moments(sde, x0, y, t, DEFAULT_MOMENT_STEPS)?,
            };
            if !(kernel.std > 0.0) {
                return Err(Error::Singular { t });
            }
            let eps = StateVector::standard_normal(x0.shape(), rng);
            let x = kernel.mean.lin_comb(1.0, &eps, kernel.std);
            let target = eps.scale(-1.0 / kernel.std);
            let weight = match weighting {
                DsmWeighting::Unweighted => 1.0,
                DsmWeighting::Variance => kernel.std * kernel.std,
                DsmWeighting::FlowMatching => sde::diffusion(sde, t)?.powi(4) / 4.0,
            };
            Ok(RegressionItem {
                x,
                y: y.clone(),
                t,
                target,
                weight,
            })
        })
        .collect()
}

/// Mean weighted squared error of `field` on `items`.
pub fn regression_loss<F: Field + ?Sized>(field: &F, items: &[RegressionItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::config("empty regression batch"));
    }
    let mut total = 0.0;
    for item in items {
        let out = field.eval(&item.x, &item.y, item.t)?;
        out.ensure_same_shape(&item.target)?;
        let err: f64 = out
            .as_slice()
            .iter()
            .zip(item.target.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += item.weight * err;
    }
    let loss = total / items.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteValue("regression loss".into()));
    }
    Ok(loss)
}

pub fn cfm_loss<F: Field + ?Sized, R: Rng + ?Sized>(
    field: &F,
    pairs: &[Pair],
    path: &PathSpec,
    t_delta: f64,
    rng: &mut R,
) -> Result<f64> {
    regression_loss(field, &cfm_items(pairs, path, t_delta, rng)?)
}

/// Unweighted DSM loss.
pub fn dsm_loss<F: Field + ?Sized, R: Rng + ?Sized>(
    score_fn: &F,
    pairs: &[Pair],
    sde: &SdeSpec,
    t_delta: f64,
    rng: &mut R,
) -> Result<f64> {
    regression_loss(
        score_fn,
        &dsm_items(pairs, sde, t_delta, DsmWeighting::Unweighted, rng)?,
    )
}

/// Reverse-process settings shared by the CRP loss and its gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrpSettings {
    pub n_rev: usize,
    pub t_rsp: f64,
    pub t_delta: f64,
    /// Backpropagate through the whole reverse trajectory instead of only the
    /// last score evaluation.
    pub full_backprop: bool,
}

impl CrpSettings {
    pub fn new(n_rev: usize, t_delta: f64) -> Self {
        Self {
            n_rev,
            t_rsp: 1.0 - t_delta,
            t_delta,
            full_backprop: false,
        }
    }
}

struct Rollout {
    /// States before each reverse step, from `t_rsp` down to `t_1`.
    states: Vec<StateVector>,
    estimate: StateVector,
}

fn rollout<F: Field + ?Sized, R: Rng + ?Sized>(
    score_fn: &F,
    x0: &StateVector,
    y: &StateVector,
    sde: &SdeSpec,
    crp: &CrpSettings,
    rng: &mut R,
) -> Result<Rollout> {
    x0.ensure_same_shape(y)?;
    let grid = make_reverse_grid(crp.n_rev, crp.t_rsp, crp.t_delta)?;
    let x_init = sample_around(y, sde.kernel_std(crp.t_rsp)?, rng);
    let mut sol = euler_maruyama_reverse_from(sde, score_fn, &x_init, y, &grid, rng, true)?;
    let estimate = sol
        .trajectory
        .pop()
        .expect("trajectory holds the final state");
    Ok(Rollout {
        states: sol.trajectory,
        estimate,
    })
}

/// `mean ||x~0 - x0||^2` where `x~0` is an Euler-Maruyama reverse sample.
pub fn crp_loss<F: Field + ?Sized, R: Rng + ?Sized>(
    score_fn: &F,
    pairs: &[Pair],
    sde: &SdeSpec,
    crp: &CrpSettings,
    rng: &mut R,
) -> Result<f64> {
    check_pairs(pairs)?;
    let mut total = 0.0;
    for (x0, y) in pairs {
        let r = rollout(score_fn, x0, y, sde, crp, rng)?;
        total += r.estimate.sub(x0).norm_sq();
    }
    Ok(total / pairs.len() as f64)
}

/// CRP loss and its gradient. Unless `full_backprop` is set, earlier score
/// evaluations are treated as constants and only the final evaluation at
/// `t_1` receives gradient.
pub fn crp_finetune_step<R: Rng + ?Sized>(
    model: &FieldModel,
    pairs: &[Pair],
    sde: &SdeSpec,
    crp: &CrpSettings,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    check_pairs(pairs)?;
    let grid = make_reverse_grid(crp.n_rev, crp.t_rsp, crp.t_delta)?;
    // Reverse order of evaluation: times t_n, ..., t_1.
    let times: Vec<f64> = grid.points()[1..].iter().rev().copied().collect();
    let scale = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.num_params()];
    for (x0, y) in pairs {
        let r = rollout(model, x0, y, sde, crp, rng)?;
        let resid = r.estimate.sub(x0);
        loss += resid.norm_sq();
        // Adjoint of the current state; starts as dL/dx~0.
        let mut adj = resid.scale(2.0 * scale);
        let last = times.len() - 1;
        let first = if crp.full_backprop { 0 } else { last };
        for k in (first..=last).rev() {
            let t = times[k];
            let t_next = if k == last { 0.0 } else { times[k + 1] };
            let dt = t_next - t;
            let g = sde::diffusion(sde, t)?;
            // x' = x + dt (y - x) / (1 - t) - g^2 dt s(x) + noise
            let d_score = adj.scale(-g * g * dt);
            let (g_theta, d_x) = model.vjp(&r.states[k], y, t, &d_score)?;
            for (acc, v) in grad.iter_mut().zip(&g_theta) {
                *acc += v;
            }
            if k > first {
                adj = adj.lin_comb(1.0 - dt / (1.0 - t), &d_x, 1.0);
            }
        }
    }
    loss *= scale;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteValue("CRP loss or gradient".into()));
    }
    Ok((loss, grad))
}
