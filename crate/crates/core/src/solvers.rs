//! Time grids and the three fixed-step integrators: Euler for the flow ODE
//! (ascending time), Euler for the probability flow ODE and Euler-Maruyama for
//! the reverse SDE (both descending in diffusion time).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::paths::{sample_prior, PathSpec};
use crate::sde::{self, SdeSpec};
use crate::state::StateVector;

/// Default time margin `t_delta`.
pub const DEFAULT_T_DELTA: f64 = 0.03;

/// Ascending time points; solvers running in diffusion time walk them from
/// the last point down to the first.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
    t_delta: f64,
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

impl TimeGrid {
    pub fn from_points(points: Vec<f64>, t_delta: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::config("a time grid needs at least two points"));
        }
        if points.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::config("time grid points must be strictly ascending"));
        }
        Ok(Self { points, t_delta })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn t_delta(&self) -> f64 {
        self.t_delta
    }

    /// Number of steps, i.e. function evaluations of a one-stage solver.
    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    /// The grid `{1 - t}` (re-sorted ascending).
    pub fn mirrored(&self) -> TimeGrid {
        TimeGrid {
            points: self.points.iter().rev().map(|t| 1.0 - t).collect(),
            t_delta: self.t_delta,
        }
    }
}

/// `{0, D, 2D, ..., 1 - t_delta, 1}` with `D = (1 - t_delta) / (n - 1)`; for
/// `n = 1` the single step `{0, 1}`.
pub fn make_fm_grid(n: usize, t_delta: f64) -> Result<TimeGrid> {
    check_t_delta(t_delta)?;
    let points = match n {
        0 => return Err(Error::config("the Euler grid needs N >= 1")),
        1 => vec![0.0, 1.0],
        _ => {
            let step = (1.0 - t_delta) / (n - 1) as f64;
            let mut p: Vec<f64> = (0..n - 1).map(|i| i as f64 * step).collect();
            p.push(1.0 - t_delta);
            p.push(1.0);
            p
        }
    };
    TimeGrid::from_points(points, t_delta)
}

/// Diffusion-time grid `0 = t_0 < t_1 = t_delta < ... < t_n = t_rsp`, uniform
/// between `t_delta` and `t_rsp`; for `n = 1` the single step `{0, t_rsp}`.
pub fn make_reverse_grid(n: usize, t_rsp: f64, t_delta: f64) -> Result<TimeGrid> {
    check_t_delta(t_delta)?;
    if !(t_rsp > t_delta && t_rsp < 1.0) {
        return Err(Error::config(format!(
            "reverse start {t_rsp} must lie in (t_delta, 1)"
        )));
    }
    let points = match n {
        0 => return Err(Error::config("the reverse grid needs at least one step")),
        1 => vec![0.0, t_rsp],
        _ => {
            let step = (t_rsp - t_delta) / (n - 1) as f64;
            let mut p = vec![0.0];
            p.extend((0..n - 1).map(|i| t_delta + i as f64 * step));
            p.push(t_rsp);
            p
        }
    };
    TimeGrid::from_points(points, t_delta)
}

/// Final state plus, when recorded, every visited state in integration order
/// (including the initial one).
#[derive(Clone, Debug)]
pub struct Solution {
    pub state: StateVector,
    pub trajectory: Vec<StateVector>,
}

fn finite_or(state: &StateVector, step: usize, t: f64) -> Result<()> {
    if state.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, t })
    }
}

/// Euler integration of `dx/dt = field(x, y, t)` over the grid in ascending
/// order: one field evaluation per step.
pub fn euler_ode<F: Field + ?Sized>(
    field: &F,
    x0: &StateVector,
    y: &StateVector,
    grid: &TimeGrid,
    record: bool,
) -> Result<Solution> {
    x0.ensure_same_shape(y)?;
    let mut x = x0.clone();
    let mut trajectory = Vec::new();
    if record {
        trajectory.push(x.clone());
    }
    for (step, w) in grid.points.windows(2).enumerate() {
        let (t, dt) = (w[0], w[1] - w[0]);
        let v = field.eval(&x, y, t)?;
        v.ensure_same_shape(&x)?;
        finite_or(&v, step, t)?;
        x.axpy(dt, &v);
        finite_or(&x, step, t)?;
        if record {
            trajectory.push(x.clone());
        }
    }
    Ok(Solution {
        state: x,
        trajectory,
    })
}

/// Draws `N(y, std^2 I)`.
pub fn sample_around<R: Rng + ?Sized>(y: &StateVector, std: f64, rng: &mut R) -> StateVector {
    let eps = StateVector::standard_normal(y.shape(), rng);
    y.lin_comb(1.0, &eps, std)
}

/// Euler-Maruyama on the reverse SDE from an explicit initial state,
/// `x <- x + [f - g^2 s] dt + g sqrt(-dt) eps` with `dt < 0`.
pub fn euler_maruyama_reverse_from<S: Field + ?Sized, R: Rng + ?Sized>(
    sde: &SdeSpec,
    score_fn: &S,
    x_init: &StateVector,
    y: &StateVector,
    grid: &TimeGrid,
    rng: &mut R,
    record: bool,
) -> Result<Solution> {
    x_init.ensure_same_shape(y)?;
    let p = grid.points();
    let mut x = x_init.clone();
    let mut trajectory = Vec::new();
    if record {
        trajectory.push(x.clone());
    }
    for (step, i) in (1..p.len()).rev().enumerate() {
        let (t, dt) = (p[i], p[i - 1] - p[i]);
        let s = score_fn.eval(&x, y, t)?;
        s.ensure_same_shape(&x)?;
        finite_or(&s, step, t)?;
        let f = sde::drift(sde, &x, y, t)?;
        let g = sde::diffusion(sde, t)?;
        let eps = StateVector::standard_normal(x.shape(), rng);
        x.axpy(dt, &f);
        x.axpy(-g * g * dt, &s);
        x.axpy(g * (-dt).sqrt(), &eps);
        finite_or(&x, step, t)?;
        if record {
            trajectory.push(x.clone());
        }
    }
    Ok(Solution {
        state: x,
        trajectory,
    })
}

/// Reverse-SDE sampling with `n_rev` score evaluations starting at `t_rsp`
/// from `N(y, std(t_rsp)^2 I)`.
pub fn euler_maruyama_reverse<S: Field + ?Sized, R: Rng + ?Sized>(
    sde: &SdeSpec,
    score_fn: &S,
    y: &StateVector,
    n_rev: usize,
    t_rsp: f64,
    t_delta: f64,
    rng: &mut R,
) -> Result<StateVector> {
    let grid = make_reverse_grid(n_rev, t_rsp, t_delta)?;
    let x_init = sample_around(y, sde.kernel_std(t_rsp)?, rng);
    Ok(euler_maruyama_reverse_from(sde, score_fn, &x_init, y, &grid, rng, false)?.state)
}

/// Euler on the probability flow ODE from an explicit initial state, walking
/// the grid downwards.
pub fn pf_ode_solve_from<S: Field + ?Sized>(
    sde: &SdeSpec,
    score_fn: &S,
    x_init: &StateVector,
    y: &StateVector,
    grid: &TimeGrid,
    record: bool,
) -> Result<Solution> {
    x_init.ensure_same_shape(y)?;
    let p = grid.points();
    let mut x = x_init.clone();
    let mut trajectory = Vec::new();
    if record {
        trajectory.push(x.clone());
    }
    for (step, i) in (1..p.len()).rev().enumerate() {
        let (t, dt) = (p[i], p[i - 1] - p[i]);
        let s = score_fn.eval(&x, y, t)?;
        s.ensure_same_shape(&x)?;
        finite_or(&s, step, t)?;
        let rhs = sde::pf_ode_rhs(sde, &s, &x, y, t)?;
        x.axpy(dt, &rhs);
        finite_or(&x, step, t)?;
        if record {
            trajectory.push(x.clone());
        }
    }
    Ok(Solution {
        state: x,
        trajectory,
    })
}

/// Probability-flow sampling with `n` score evaluations from diffusion time
/// `1 - t_delta`, initialised from `N(y, std(1 - t_delta)^2 I)`.
pub fn pf_ode_solve<S: Field + ?Sized, R: Rng + ?Sized>(
    sde: &SdeSpec,
    score_fn: &S,
    y: &StateVector,
    n: usize,
    t_delta: f64,
    rng: &mut R,
) -> Result<StateVector> {
    let t_start = 1.0 - t_delta;
    let grid = make_reverse_grid(n, t_start, t_delta)?;
    let x_init = sample_around(y, sde.kernel_std(t_start)?, rng);
    Ok(pf_ode_solve_from(sde, score_fn, &x_init, y, &grid, false)?.state)
}

/// Which integrator turns a trained model into an estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampler {
    /// Euler on the flow ODE with a vector-field model.
    Fm,
    /// Euler on the probability flow ODE with a score model.
    PfOde,
    /// Euler-Maruyama on the reverse SDE with a score model.
    Eum,
}

impl Sampler {
    pub const ALL: [Sampler; 3] = [Sampler::Fm, Sampler::PfOde, Sampler::Eum];

    pub fn name(&self) -> &'static str {
        match self {
            Sampler::Fm => "fm",
            Sampler::PfOde => "pfode",
            Sampler::Eum => "eum",
        }
    }

    pub fn needs_score(&self) -> bool {
        !matches!(self, Sampler::Fm)
    }
}

impl std::str::FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fm" => Ok(Sampler::Fm),
            "pfode" => Ok(Sampler::PfOde),
            "eum" => Ok(Sampler::Eum),
            other => Err(Error::config(format!(
                "unknown sampler {other:?} (expected fm, pfode or eum)"
            ))),
        }
    }
}

/// Everything needed to turn a trained field or score into an estimate of
/// the clean state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Inference {
    pub sampler: Sampler,
    pub nfe: usize,
    pub path: PathSpec,
    pub sde: SdeSpec,
    pub t_delta: f64,
    /// Start of the reverse SDE; only used by [`Sampler::Eum`].
    pub t_rsp: f64,
}

impl Inference {
    pub fn new(sampler: Sampler, nfe: usize, path: PathSpec, sde: SdeSpec, t_delta: f64) -> Self {
        Self {
            sampler,
            nfe,
            path,
            sde,
            t_delta,
            t_rsp: 1.0 - t_delta,
        }
    }

    /// `field` is a vector field for [`Sampler::Fm`] and a score otherwise.
    pub fn run<F: Field + ?Sized, R: Rng + ?Sized>(
        &self,
        field: &F,
        y: &StateVector,
        rng: &mut R,
    ) -> Result<StateVector> {
        match self.sampler {
            Sampler::Fm => {
                let grid = make_fm_grid(self.nfe, self.t_delta)?;
                let x0 = sample_prior(&self.path, y, rng);
                Ok(euler_ode(field, &x0, y, &grid, false)?.state)
            }
            Sampler::PfOde => pf_ode_solve(&self.sde, field, y, self.nfe, self.t_delta, rng),
            Sampler::Eum => {
                euler_maruyama_reverse(&self.sde, field, y, self.nfe, self.t_rsp, self.t_delta, rng)
            }
        }
    }
}
