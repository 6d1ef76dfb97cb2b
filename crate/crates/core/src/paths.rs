//! Gaussian conditional probability paths `N(mu_t, sigma_t^2 I)`, their
//! conditional flows, vector fields and scores, and the closed-form marginal
//! field for a Gaussian clean-signal posterior.
//!
//! Two paths are provided:
//!
//! * [`PathKind::FlowSe`]: the mean moves linearly from the noisy observation
//!   `y` to the clean target `x1` while the deviation shrinks linearly to zero,
//!   `mu_t = t x1 + (1 - t) y`, `sigma_t = (1 - t) sigma`.
//! * [`PathKind::LipmanOt`]: the unconditioned optimal-transport path,
//!   `mu_t = t x1`, `sigma_t = 1 - (1 - sigma) t`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::StateVector;

/// Deviation of the FlowSE path at `t = 0` used unless configured otherwise.
pub const DEFAULT_SIGMA: f64 = 0.487;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathKind {
    FlowSe,
    LipmanOt,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub kind: PathKind,
    pub sigma: f64,
}

impl Default for PathSpec {
    fn default() -> Self {
        Self {
            kind: PathKind::FlowSe,
            sigma: DEFAULT_SIGMA,
        }
    }
}

/// `mu_t`, `sigma_t` and their exact time derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct PathCoeffs {
    pub mu: StateVector,
    pub sigma: f64,
    pub mu_dot: StateVector,
    pub sigma_dot: f64,
}

/// Isotropic Gaussian `q(x1 | y) = N(mean, gamma^2 I)`.
///
/// `gamma = 0` is accepted and denotes a point mass at `mean`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianTarget {
    pub mean: StateVector,
    pub gamma: f64,
}

impl GaussianTarget {
    pub fn new(mean: StateVector, gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::config(format!(
                "target std must be >= 0, got {gamma}"
            )));
        }
        Ok(Self { mean, gamma })
    }

    pub fn point_mass(mean: StateVector) -> Self {
        Self { mean, gamma: 0.0 }
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::TimeOutOfRange { t, range: "[0, 1]" })
    }
}

impl PathSpec {
    pub fn flow_se(sigma: f64) -> Result<Self> {
        Self::new(PathKind::FlowSe, sigma)
    }

    pub fn lipman_ot(sigma: f64) -> Result<Self> {
        Self::new(PathKind::LipmanOt, sigma)
    }

    pub fn new(kind: PathKind, sigma: f64) -> Result<Self> {
        let spec = Self { kind, sigma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!(
                "path sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if self.kind == PathKind::LipmanOt && self.sigma >= 1.0 {
            return Err(Error::config("optimal-transport path needs sigma < 1"));
        }
        Ok(())
    }

    /// Weights `(a, b)` with `mu_t = a x1 + b y`.
    fn mean_weights(&self, t: f64) -> (f64, f64) {
        match self.kind {
            PathKind::FlowSe => (t, 1.0 - t),
            PathKind::LipmanOt => (t, 0.0),
        }
    }

    fn mean_weight_rates(&self) -> (f64, f64) {
        match self.kind {
            PathKind::FlowSe => (1.0, -1.0),
            PathKind::LipmanOt => (1.0, 0.0),
        }
    }

    pub fn sigma_t(&self, t: f64) -> f64 {
        match self.kind {
            PathKind::FlowSe => (1.0 - t) * self.sigma,
            PathKind::LipmanOt => 1.0 - (1.0 - self.sigma) * t,
        }
    }

    pub fn sigma_dot(&self) -> f64 {
        match self.kind {
            PathKind::FlowSe => -self.sigma,
            PathKind::LipmanOt => -(1.0 - self.sigma),
        }
    }

    /// `sigma'_t / sigma_t`. For FlowSE the ratio is `-1 / (1 - t)` for every
    /// `sigma`, including the point-mass path `sigma = 0`.
    fn log_sigma_rate(&self, t: f64) -> Result<f64> {
        match self.kind {
            PathKind::FlowSe if t < 1.0 => Ok(-1.0 / (1.0 - t)),
            _ => {
                let s = self.sigma_t(t);
                if s > 0.0 {
                    Ok(self.sigma_dot() / s)
                } else {
                    Err(Error::Singular { t })
                }
            }
        }
    }

    fn mean(&self, x1: &StateVector, y: &StateVector, t: f64) -> StateVector {
        let (a, b) = self.mean_weights(t);
        x1.lin_comb(a, y, b)
    }

    fn mean_dot(&self, x1: &StateVector, y: &StateVector) -> StateVector {
        let (a, b) = self.mean_weight_rates();
        x1.lin_comb(a, y, b)
    }
}

pub fn path_coeffs(
    path: &PathSpec,
    x1: &StateVector,
    y: &StateVector,
    t: f64,
) -> Result<PathCoeffs> {
    x1.ensure_same_shape(y)?;
    check_time(t)?;
    Ok(PathCoeffs {
        mu: path.mean(x1, y, t),
        sigma: path.sigma_t(t),
        mu_dot: path.mean_dot(x1, y),
        sigma_dot: path.sigma_dot(),
    })
}

/// `phi_t(x0 | x1, y) = (sigma_t / sigma_0) (x0 - mu_0) + mu_t`.
pub fn cond_flow(
    path: &PathSpec,
    x0: &StateVector,
    x1: &StateVector,
    y: &StateVector,
    t: f64,
) -> Result<StateVector> {
    x0.ensure_same_shape(x1)?;
    x1.ensure_same_shape(y)?;
    check_time(t)?;
    let sigma_0 = path.sigma_t(0.0);
    if sigma_0 <= 0.0 {
        return Err(Error::DegeneratePath(
            "sigma_0 = 0, the flow is undefined".into(),
        ));
    }
    if t == 0.0 {
        return Ok(x0.clone());
    }
    let ratio = path.sigma_t(t) / sigma_0;
    let mu_0 = path.mean(x1, y, 0.0);
    let mu_t = path.mean(x1, y, t);
    Ok(x0.sub(&mu_0).lin_comb(ratio, &mu_t, 1.0))
}

/// `v_t(x | x1, y) = (sigma'_t / sigma_t) (x - mu_t) + mu'_t`.
pub fn cond_vector_field(
    path: &PathSpec,
    x: &StateVector,
    x1: &StateVector,
    y: &StateVector,
    t: f64,
) -> Result<StateVector> {
    x.ensure_same_shape(x1)?;
    x1.ensure_same_shape(y)?;
    check_time(t)?;
    let rate = path.log_sigma_rate(t)?;
    let mu_t = path.mean(x1, y, t);
    let mu_dot = path.mean_dot(x1, y);
    Ok(x.sub(&mu_t).lin_comb(rate, &mu_dot, 1.0))
}

/// Draws `x_t = mu_t + sigma_t * eps`, `eps ~ N(0, I)`.
pub fn sample_conditional<R: Rng + ?Sized>(
    path: &PathSpec,
    x1: &StateVector,
    y: &StateVector,
    t: f64,
    rng: &mut R,
) -> Result<StateVector> {
    x1.ensure_same_shape(y)?;
    check_time(t)?;
    let eps = StateVector::standard_normal(x1.shape(), rng);
    Ok(path.mean(x1, y, t).lin_comb(1.0, &eps, path.sigma_t(t)))
}

/// Draws a starting point from `p_0 = N(mu_0, sigma_0^2 I)`; `mu_0` does not
/// depend on the clean signal for either path.
pub fn sample_prior<R: Rng + ?Sized>(path: &PathSpec, y: &StateVector, rng: &mut R) -> StateVector {
    let (_, b) = path.mean_weights(0.0);
    let eps = StateVector::standard_normal(y.shape(), rng);
    y.lin_comb(b, &eps, path.sigma_t(0.0))
}

/// Score of the conditional path, `-(x - mu_t) / sigma_t^2`.
pub fn cond_score(
    path: &PathSpec,
    x: &StateVector,
    x1: &StateVector,
    y: &StateVector,
    t: f64,
) -> Result<StateVector> {
    x.ensure_same_shape(x1)?;
    x1.ensure_same_shape(y)?;
    check_time(t)?;
    let s = path.sigma_t(t);
    if s <= 0.0 {
        return Err(Error::Singular { t });
    }
    Ok(x.sub(&path.mean(x1, y, t)).scale(-1.0 / (s * s)))
}

/// Posterior of `x1` given `x_t = x` on the FlowSE path when `x1 ~ target`:
/// returns the posterior mean and the per-coordinate posterior variance.
pub fn flow_se_posterior(
    path: &PathSpec,
    target: &GaussianTarget,
    x: &StateVector,
    y: &StateVector,
    t: f64,
) -> Result<(StateVector, f64)> {
    if path.kind != PathKind::FlowSe {
        return Err(Error::config(
            "the marginal oracle is defined for the FlowSE path only",
        ));
    }
    x.ensure_same_shape(y)?;
    x.ensure_same_shape(&target.mean)?;
    check_time(t)?;
    let g2 = target.gamma * target.gamma;
    let s = (1.0 - t) * path.sigma;
    let var = t * t * g2 + s * s;
    if var <= 0.0 {
        return Err(Error::DegeneratePath(format!(
            "marginal variance vanishes at t = {t}"
        )));
    }
    let gain = t * g2 / var;
    // x - t m - (1 - t) y
    let innovation = x.sub(&path.mean(&target.mean, y, t));
    let post_mean = target.mean.lin_comb(1.0, &innovation, gain);
    Ok((post_mean, g2 * (1.0 - gain * t)))
}

/// Marginal FlowSE vector field for a Gaussian target, i.e. the conditional
/// field evaluated at the posterior mean of `x1`.
pub fn marginal_field_oracle(
    path: &PathSpec,
    target: &GaussianTarget,
    x: &StateVector,
    y: &StateVector,
    t: f64,
) -> Result<StateVector> {
    if t >= 1.0 {
        return Err(Error::TimeOutOfRange { t, range: "[0, 1)" });
    }
    let (post_mean, _) = flow_se_posterior(path, target, x, y, t)?;
    cond_vector_field(path, x, &post_mean, y, t)
}

/// Marginal law `N(t m + (1 - t) y, (t^2 gamma^2 + (1 - t)^2 sigma^2) I)` of
/// `x_t` on the FlowSE path; returns the mean and standard deviation.
pub fn flow_se_marginal(
    path: &PathSpec,
    target: &GaussianTarget,
    y: &StateVector,
    t: f64,
) -> Result<(StateVector, f64)> {
    target.mean.ensure_same_shape(y)?;
    check_time(t)?;
    let var = (t * target.gamma).powi(2) + ((1.0 - t) * path.sigma).powi(2);
    Ok((path.mean(&target.mean, y, t), var.sqrt()))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn s1(v: f64) -> StateVector {
        StateVector::toy(vec![v]).unwrap()
    }

    fn flow_se() -> PathSpec {
        PathSpec::flow_se(0.487).unwrap()
    }

    #[test]
    fn coeffs_at_start_and_end() {
        let x1 = StateVector::toy(vec![0.3, -1.2]).unwrap();
        let y = StateVector::toy(vec![2.0, 0.5]).unwrap();
        let c0 = path_coeffs(&flow_se(), &x1, &y, 0.0).unwrap();
        assert_eq!(c0.mu, y);
        assert_eq!(c0.sigma, 0.487);
        let c1 = path_coeffs(&flow_se(), &x1, &y, 1.0).unwrap();
        assert_eq!(c1.mu, x1);
        assert_eq!(c1.sigma, 0.0);
    }

    #[test]
    fn coeffs_midpoint() {
        let c = path_coeffs(&flow_se(), &s1(1.0), &s1(0.0), 0.5).unwrap();
        assert_eq!(c.mu.as_slice(), &[0.5]);
        assert!((c.sigma - 0.2435).abs() < 1e-15);
        assert_eq!(c.mu_dot.as_slice(), &[1.0]);
        assert_eq!(c.sigma_dot, -0.487);
    }

    #[test]
    fn coeffs_errors() {
        let a = StateVector::toy(vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            path_coeffs(&flow_se(), &a, &s1(0.0), 0.5),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            path_coeffs(&flow_se(), &s1(1.0), &s1(0.0), 1.5),
            Err(Error::TimeOutOfRange { .. })
        ));
        assert!(PathSpec::lipman_ot(1.0).is_err());
        assert!(PathSpec::flow_se(-0.1).is_err());
    }

    #[test]
    fn flow_examples() {
        let p = flow_se();
        let (x0, x1, y) = (s1(0.7), s1(1.0), s1(0.0));
        assert_eq!(cond_flow(&p, &x0, &x1, &y, 0.0).unwrap(), x0);
        assert_eq!(cond_flow(&p, &x0, &x1, &y, 1.0).unwrap(), x1);
        let mid = cond_flow(&p, &x0, &x1, &y, 0.5).unwrap();
        assert!((mid.as_slice()[0] - 0.85).abs() < 1e-15);
    }

    #[test]
    fn flow_needs_positive_sigma_0() {
        let p = PathSpec::flow_se(0.0).unwrap();
        assert!(matches!(
            cond_flow(&p, &s1(0.0), &s1(1.0), &s1(0.0), 0.5),
            Err(Error::DegeneratePath(_))
        ));
    }

    #[test]
    fn field_examples() {
        let p = flow_se();
        let (x1, y) = (s1(1.0), s1(0.0));
        let v = cond_vector_field(&p, &s1(0.6), &x1, &y, 0.5).unwrap();
        assert!((v.as_slice()[0] - 0.8).abs() < 1e-14);
        let v0 = cond_vector_field(&p, &s1(0.0), &x1, &y, 0.0).unwrap();
        assert_eq!(v0.as_slice(), &[1.0]);
        // x = mu_t follows the mean velocity
        let mu = path_coeffs(&p, &x1, &y, 0.3).unwrap().mu;
        let v = cond_vector_field(&p, &mu, &x1, &y, 0.3).unwrap();
        assert!((v.as_slice()[0] - 1.0).abs() < 1e-15);
        assert!(matches!(
            cond_vector_field(&p, &s1(0.6), &x1, &y, 1.0),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn point_mass_path_has_a_field() {
        let p = PathSpec::flow_se(0.0).unwrap();
        let v = cond_vector_field(&p, &s1(0.5), &s1(1.0), &s1(0.0), 0.5).unwrap();
        assert!((v.as_slice()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn score_examples() {
        let p = flow_se();
        let (x1, y) = (s1(1.0), s1(0.0));
        let sc = cond_score(&p, &s1(0.6), &x1, &y, 0.5).unwrap();
        let expected = -0.1 / (0.2435f64 * 0.2435);
        assert!((sc.as_slice()[0] - expected).abs() < 1e-12);
        assert!((sc.as_slice()[0] + 1.6866).abs() < 1e-4);
        let zero = cond_score(&p, &s1(0.5), &x1, &y, 0.5).unwrap();
        assert_eq!(zero.as_slice(), &[0.0]);
        let doubled = cond_score(&p, &s1(0.7), &x1, &y, 0.5).unwrap();
        assert!((doubled.as_slice()[0] - 2.0 * sc.as_slice()[0]).abs() < 1e-12);
    }

    #[test]
    fn sample_at_end_is_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x1 = StateVector::toy(vec![0.1, 0.2, 0.3]).unwrap();
        let y = StateVector::toy(vec![1.0, 1.0, 1.0]).unwrap();
        for _ in 0..5 {
            assert_eq!(
                sample_conditional(&flow_se(), &x1, &y, 1.0, &mut rng).unwrap(),
                x1
            );
        }
    }

    #[test]
    fn oracle_at_start() {
        let p = flow_se();
        let m = StateVector::toy(vec![0.4, -0.2]).unwrap();
        let target = GaussianTarget::new(m.clone(), 0.3).unwrap();
        let x = StateVector::toy(vec![1.5, 0.1]).unwrap();
        let y = StateVector::toy(vec![1.0, 0.0]).unwrap();
        let v = marginal_field_oracle(&p, &target, &x, &y, 0.0).unwrap();
        let expected = m.sub(&y).sub(&x.sub(&y));
        assert!(v.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn oracle_point_mass_is_conditional_field() {
        let p = flow_se();
        let m = StateVector::toy(vec![0.4, -0.2]).unwrap();
        let target = GaussianTarget::point_mass(m.clone());
        let x = StateVector::toy(vec![1.5, 0.1]).unwrap();
        let y = StateVector::toy(vec![1.0, 0.0]).unwrap();
        for t in [0.0, 0.2, 0.77] {
            let v = marginal_field_oracle(&p, &target, &x, &y, t).unwrap();
            let c = cond_vector_field(&p, &x, &m, &y, t).unwrap();
            assert_eq!(v, c);
        }
    }

    #[test]
    fn oracle_rejects_degenerate_variance() {
        let p = PathSpec::flow_se(0.0).unwrap();
        let target = GaussianTarget::point_mass(s1(1.0));
        assert!(matches!(
            marginal_field_oracle(&p, &target, &s1(0.0), &s1(0.0), 0.5),
            Err(Error::DegeneratePath(_))
        ));
        assert!(marginal_field_oracle(&flow_se(), &target, &s1(0.0), &s1(0.0), 1.0).is_err());
    }
}
