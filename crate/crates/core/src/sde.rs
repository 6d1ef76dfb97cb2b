//! Forward SDEs `dx = f(x, y, t) dt + g(t) dw` that share the Brownian-bridge
//! drift `f = (y - x) / (1 - t)`, their perturbation-kernel moments, and the
//! probability-flow bridge to the flow-matching vector field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::state::StateVector;

/// Distance to `t = 1` below which the drift is treated as singular.
pub const SINGULARITY_GUARD: f64 = 1e-6;

/// Default step count for the kernel moment integrator.
pub const DEFAULT_MOMENT_STEPS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SdeSpec {
    /// `g(t) = sqrt(2 t sigma^2 / (1 - t))`; its perturbation kernel is the
    /// FlowSE path run backwards in time.
    FlowEquivalent { sigma: f64 },
    /// `g(t) = c k^t`. The defaults `c = 0.1`, `k = 2` are only meant for
    /// numerical tests.
    Bbed { c: f64, k: f64 },
}

impl Default for SdeSpec {
    fn default() -> Self {
        SdeSpec::FlowEquivalent {
            sigma: crate::paths::DEFAULT_SIGMA,
        }
    }
}

/// Mean and isotropic standard deviation of `p_t(x_t | x0, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMoments {
    pub mean: StateVector,
    pub std: f64,
}

fn guard(t: f64) -> Result<()> {
    if t < 0.0 {
        return Err(Error::TimeOutOfRange { t, range: "[0, 1)" });
    }
    if t >= 1.0 - SINGULARITY_GUARD {
        return Err(Error::Singular { t });
    }
    Ok(())
}

impl SdeSpec {
    pub fn bbed_default() -> Self {
        SdeSpec::Bbed { c: 0.1, k: 2.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SdeSpec::FlowEquivalent { sigma } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            SdeSpec::Bbed { c, k } if c > 0.0 && k > 0.0 && c.is_finite() && k.is_finite() => {
                Ok(())
            }
            other => Err(Error::config(format!("invalid SDE coefficients {other:?}"))),
        }
    }

    fn diffusion_sq(&self, t: f64) -> f64 {
        match *self {
            SdeSpec::FlowEquivalent { sigma } => 2.0 * t * sigma * sigma / (1.0 - t),
            SdeSpec::Bbed { c, k } => (c * k.powf(t)).powi(2),
        }
    }

    /// Kernel standard deviation at `t`; independent of `x0` and `y`.
    pub fn kernel_std(&self, t: f64) -> Result<f64> {
        guard(t)?;
        match *self {
            SdeSpec::FlowEquivalent { sigma } => Ok(t * sigma),
            SdeSpec::Bbed { .. } => {
                let (_, var) = self.integrate_moments(None, t, DEFAULT_MOMENT_STEPS);
                Ok(var.max(0.0).sqrt())
            }
        }
    }

    /// RK4 on `dmu/ds = (y - mu) / (1 - s)` (per coordinate, when `mean` is
    /// given as `(x0, y)`) and `dP/ds = -2 P / (1 - s) + g(s)^2`.
    fn integrate_moments(
        &self,
        mean: Option<(&StateVector, &StateVector)>,
        t: f64,
        steps: usize,
    ) -> (Option<StateVector>, f64) {
        let h = t / steps as f64;
        let mut mu = mean.map(|(x0, _)| x0.as_slice().to_vec());
        let y = mean.map(|(_, y)| y.as_slice());
        let mut p = 0.0;
        let dp = |s: f64, p: f64| -2.0 * p / (1.0 - s) + self.diffusion_sq(s);
        for i in 0..steps {
            let s = i as f64 * h;
            let k1 = dp(s, p);
            let k2 = dp(s + 0.5 * h, p + 0.5 * h * k1);
            let k3 = dp(s + 0.5 * h, p + 0.5 * h * k2);
            let k4 = dp(s + h, p + h * k3);
            p += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if let (Some(mu), Some(y)) = (mu.as_mut(), y) {
                for (m, &yv) in mu.iter_mut().zip(y) {
                    let f = |s: f64, m: f64| (yv - m) / (1.0 - s);
                    let k1 = f(s, *m);
                    let k2 = f(s + 0.5 * h, *m + 0.5 * h * k1);
                    let k3 = f(s + 0.5 * h, *m + 0.5 * h * k2);
                    let k4 = f(s + h, *m + h * k3);
                    *m += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                }
            }
        }
        let shape = mean.map(|(x0, _)| x0.shape());
        (
            mu.zip(shape)
                .map(|(m, shape)| StateVector::from_raw(shape, m)),
            p,
        )
    }
}

pub fn drift(sde: &SdeSpec, x: &StateVector, y: &StateVector, t: f64) -> Result<StateVector> {
    x.ensure_same_shape(y)?;
    guard(t)?;
    let _ = sde;
    Ok(y.sub(x).scale(1.0 / (1.0 - t)))
}

pub fn diffusion(sde: &SdeSpec, t: f64) -> Result<f64> {
    match sde {
        SdeSpec::FlowEquivalent { .. } => guard(t)?,
        SdeSpec::Bbed { .. } if t < 0.0 => {
            return Err(Error::TimeOutOfRange { t, range: "[0, 1]" })
        }
        SdeSpec::Bbed { .. } => {}
    }
    Ok(sde.diffusion_sq(t).sqrt())
}

/// Integrates the mean and variance ODEs of the perturbation kernel from
/// `s = 0` (`mu = x0`, `P = 0`) to `s = t` with `steps` RK4 steps.
pub fn kernel_moments(
    sde: &SdeSpec,
    x0: &StateVector,
    y: &StateVector,
    t: f64,
    steps: usize,
) -> Result<KernelMoments> {
    x0.ensure_same_shape(y)?;
    guard(t)?;
    if steps == 0 {
        return Err(Error::config("kernel_moments needs at least one step"));
    }
    let (mean, var) = sde.integrate_moments(Some((x0, y)), t, steps);
    Ok(KernelMoments {
        mean: mean.expect("mean requested"),
        std: var.max(0.0).sqrt(),
    })
}

/// Closed-form kernel of the flow-equivalent SDE:
/// `N((1 - t) x0 + t y, (t sigma)^2 I)`.
pub fn flow_equivalent_kernel(
    sigma: f64,
    x0: &StateVector,
    y: &StateVector,
    t: f64,
) -> Result<KernelMoments> {
    x0.ensure_same_shape(y)?;
    Ok(KernelMoments {
        mean: x0.lin_comb(1.0 - t, y, t),
        std: t * sigma,
    })
}

/// Right-hand side of the probability flow ODE, `f - g^2 score / 2`.
pub fn pf_ode_rhs(
    sde: &SdeSpec,
    score: &StateVector,
    x: &StateVector,
    y: &StateVector,
    t: f64,
) -> Result<StateVector> {
    score.ensure_same_shape(x)?;
    let f = drift(sde, x, y, t)?;
    let g2 = sde.diffusion_sq(t);
    Ok(f.lin_comb(1.0, score, -0.5 * g2))
}

/// Flow-matching field at FM time `t_fm` recovered from a score: FM time
/// `t_fm` is diffusion time `1 - t_fm`, traversed in the opposite direction.
pub fn fm_field_from_score<S: Field + ?Sized>(
    sde: &SdeSpec,
    score_fn: &S,
    x: &StateVector,
    y: &StateVector,
    t_fm: f64,
) -> Result<StateVector> {
    if !matches!(sde, SdeSpec::FlowEquivalent { .. }) {
        return Err(Error::config("the FM bridge needs the flow-equivalent SDE"));
    }
    if t_fm <= 0.0 {
        return Err(Error::TimeOutOfRange {
            t: t_fm,
            range: "(0, 1]",
        });
    }
    let t = 1.0 - t_fm;
    let score = score_fn.eval(x, y, t)?;
    Ok(pf_ode_rhs(sde, &score, x, y, t)?.scale(-1.0))
}

/// Score at diffusion time `t` recovered from a flow-matching field, the
/// inverse of [`fm_field_from_score`]: `s = 2 (f + v(x, 1 - t)) / g^2`.
pub fn score_from_fm_field<V: Field + ?Sized>(
    sde: &SdeSpec,
    field: &V,
    x: &StateVector,
    y: &StateVector,
    t: f64,
) -> Result<StateVector> {
    if !matches!(sde, SdeSpec::FlowEquivalent { .. }) {
        return Err(Error::config("the FM bridge needs the flow-equivalent SDE"));
    }
    if t <= 0.0 {
        return Err(Error::TimeOutOfRange { t, range: "(0, 1)" });
    }
    let f = drift(sde, x, y, t)?;
    let v = field.eval(x, y, 1.0 - t)?;
    Ok(f.lin_comb(1.0, &v, 1.0).scale(2.0 / sde.diffusion_sq(t)))
}

/// A score model seen as a flow-matching field.
pub struct FieldFromScore<'a, S: ?Sized> {
    pub sde: SdeSpec,
    pub score: &'a S,
}

impl<S: Field + ?Sized> Field for FieldFromScore<'_, S> {
    fn eval(&self, x: &StateVector, y: &StateVector, t: f64) -> Result<StateVector> {
        fm_field_from_score(&self.sde, self.score, x, y, t)
    }
}

/// A flow-matching field seen as a score model.
pub struct ScoreFromField<'a, V: ?Sized> {
    pub sde: SdeSpec,
    pub field: &'a V,
}

impl<V: Field + ?Sized> Field for ScoreFromField<'_, V> {
    fn eval(&self, x: &StateVector, y: &StateVector, t: f64) -> Result<StateVector> {
        score_from_fm_field(&self.sde, self.field, x, y, t)
    }
}
