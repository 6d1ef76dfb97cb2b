//! Linear-Gaussian enhancement task with closed-form posteriors, used as the
//! oracle for solvers, losses and training.
//!
//! `y ~ N(0, y_scale^2 I)` and the clean signal is `x1 | y ~ N(gain * y +
//! offset, gamma^2 I)` coordinatewise.

use rand::Rng;

use crate::error::Result;
use crate::field::Field;
use crate::paths::{flow_se_marginal, marginal_field_oracle, GaussianTarget, PathSpec};
use crate::sde::{diffusion, SdeSpec};
use crate::solvers::TimeGrid;
use crate::state::StateVector;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianTask {
    pub dim: usize,
    pub gain: f64,
    pub offset: f64,
    pub gamma: f64,
    pub y_scale: f64,
}

impl Default for GaussianTask {
    fn default() -> Self {
        Self {
            dim: 2,
            gain: 0.5,
            offset: 0.25,
            gamma: 0.2,
            y_scale: 1.0,
        }
    }
}

impl GaussianTask {
    pub fn target(&self, y: &StateVector) -> GaussianTarget {
        GaussianTarget {
            mean: y.map(|v| self.gain * v + self.offset),
            gamma: self.gamma,
        }
    }

    /// Draws a `(clean, noisy)` pair.
    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (StateVector, StateVector) {
        let shape = crate::state::Shape::Toy(self.dim);
        let y = StateVector::standard_normal(shape, rng).scale(self.y_scale);
        let eps = StateVector::standard_normal(shape, rng);
        let x1 = self.target(&y).mean.lin_comb(1.0, &eps, self.gamma);
        (x1, y)
    }

    pub fn sample_pairs<R: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut R,
    ) -> Vec<(StateVector, StateVector)> {
        (0..n).map(|_| self.sample_pair(rng)).collect()
    }

    /// Exact marginal FlowSE vector field.
    pub fn oracle_field(&self, path: PathSpec) -> OracleField {
        OracleField { task: *self, path }
    }

    /// Exact score of the flow-equivalent SDE marginal at diffusion time `t`.
    pub fn oracle_score(&self, sigma: f64) -> OracleScore {
        OracleScore { task: *self, sigma }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OracleField {
    pub task: GaussianTask,
    pub path: PathSpec,
}

impl OracleField {
    /// Exact solution of the marginal ODE from `x0` at time 0: the affine map
    /// `mu_t + (s_t / s_0) (x0 - mu_0)` between the Gaussian marginals.
    pub fn exact_flow(&self, x0: &StateVector, y: &StateVector, t: f64) -> Result<StateVector> {
        let target = self.task.target(y);
        let (mu_0, s_0) = flow_se_marginal(&self.path, &target, y, 0.0)?;
        let (mu_t, s_t) = flow_se_marginal(&self.path, &target, y, t)?;
        Ok(x0.sub(&mu_0).lin_comb(s_t / s_0, &mu_t, 1.0))
    }
}

impl Field for OracleField {
    fn eval(&self, x: &StateVector, y: &StateVector, t: f64) -> Result<StateVector> {
        marginal_field_oracle(&self.path, &self.task.target(y), x, y, t)
    }
}

/// `-(x - (1 - t) m - t y) / ((1 - t)^2 gamma^2 + t^2 sigma^2)`.
#[derive(Clone, Copy, Debug)]
pub struct OracleScore {
    pub task: GaussianTask,
    pub sigma: f64,
}

impl OracleScore {
    pub fn marginal(&self, y: &StateVector, t: f64) -> (StateVector, f64) {
        let target = self.task.target(y);
        let mean = target.mean.lin_comb(1.0 - t, y, t);
        let var = ((1.0 - t) * target.gamma).powi(2) + (t * self.sigma).powi(2);
        (mean, var)
    }
}

impl Field for OracleScore {
    fn eval(&self, x: &StateVector, y: &StateVector, t: f64) -> Result<StateVector> {
        x.ensure_same_shape(y)?;
        let (mean, var) = self.marginal(y, t);
        if var <= 0.0 {
            return Err(crate::error::Error::Singular { t });
        }
        Ok(x.sub(&mean).scale(-1.0 / var))
    }
}

/// Law of the Euler-Maruyama reverse chain driven by [`OracleScore`] on the
/// flow-equivalent SDE. Every step is affine in the state, so the output is
/// Gaussian with the returned mean and per-coordinate variance.
pub fn eum_chain_law(
    score: &OracleScore,
    y: &StateVector,
    grid: &TimeGrid,
    init_std: f64,
) -> Result<(StateVector, f64)> {
    let sde = SdeSpec::FlowEquivalent { sigma: score.sigma };
    let p = grid.points();
    let mut mean = y.clone();
    let mut var = init_std * init_std;
    for i in (1..p.len()).rev() {
        let (t, dt) = (p[i], p[i - 1] - p[i]);
        let g2 = diffusion(&sde, t)?.powi(2);
        let (m_t, v_t) = score.marginal(y, t);
        // x' = a x + b + sqrt(-dt) g eps
        let a = 1.0 - dt / (1.0 - t) + g2 * dt / v_t;
        let b = y.lin_comb(dt / (1.0 - t), &m_t, -g2 * dt / v_t);
        mean = mean.lin_comb(a, &b, 1.0);
        var = a * a * var - g2 * dt;
    }
    Ok((mean, var))
}

/// Expected `||x~0 - x0||^2` between a chain output and an independent clean
/// draw `x0 ~ N(m, gamma^2 I)`.
pub fn eum_chain_mse(
    score: &OracleScore,
    y: &StateVector,
    grid: &TimeGrid,
    init_std: f64,
) -> Result<f64> {
    let (mean, var) = eum_chain_law(score, y, grid, init_std)?;
    let target = score.task.target(y);
    let d = y.len() as f64;
    Ok(mean.sub(&target.mean).norm_sq() + d * (var + target.gamma * target.gamma))
}
