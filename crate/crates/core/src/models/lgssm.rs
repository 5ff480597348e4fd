//! Linear-Gaussian state-space model with an unknown level.

use rand_distr::{Distribution, StandardNormal};

use super::{ObservationKind, SsmModel};
use crate::error::{invalid, Result};
use crate::oracle::LgssmParams;
use crate::rng::StreamRng;
use crate::scoring::DensityDerivatives;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// AR(1) latent level `x_{t+1} = μ + φ (x_t - μ) + σ_x ε` observed with
/// Normal noise `y_t = x_t + σ_y η`. The parameter is the level `μ`, with
/// prior `N(0, prior_var)`; `φ`, `σ_x`, `σ_y` are fixed.
#[derive(Debug, Clone)]
pub struct LgssmModel {
    params: LgssmParams<f64>,
    prior_var: f64,
}

impl LgssmModel {
    pub fn new(phi: f64, sigma_x: f64, sigma_y: f64, prior_var: f64) -> Result<Self> {
        let params = LgssmParams::new(phi, sigma_x, sigma_y)?;
        if !(prior_var > 0.0) {
            return Err(invalid("prior variance must be positive"));
        }
        Ok(Self { params, prior_var })
    }

    /// Overrides the variance of `x_1` around `μ`.
    pub fn with_init_var(mut self, v: f64) -> Result<Self> {
        self.params.init_var = Some(v);
        self.params.validate()?;
        Ok(self)
    }

    /// Fixed dynamics; `mu` is a placeholder.
    pub fn params(&self) -> &LgssmParams<f64> {
        &self.params
    }

    pub fn prior_var(&self) -> f64 {
        self.prior_var
    }

    /// Dynamics with the level set to `mu`.
    pub fn params_at(&self, mu: f64) -> LgssmParams<f64> {
        LgssmParams { mu, ..self.params }
    }
}

impl SsmModel for LgssmModel {
    fn name(&self) -> &str {
        "lgssm"
    }

    fn param_names(&self) -> Vec<String> {
        vec!["level".into()]
    }

    fn dim_theta(&self) -> usize {
        1
    }

    fn dim_x(&self) -> usize {
        1
    }

    fn dim_y(&self) -> usize {
        1
    }

    fn prior_log_density(&self, theta: &[f64]) -> f64 {
        -0.5 * (LN_2PI + self.prior_var.ln() + theta[0] * theta[0] / self.prior_var)
    }

    fn sample_prior(&self, rng: &mut StreamRng) -> Option<Vec<f64>> {
        let z: f64 = StandardNormal.sample(rng);
        Some(vec![self.prior_var.sqrt() * z])
    }

    fn sample_initial(&self, theta: &[f64], x: &mut [f64], rng: &mut StreamRng) {
        let z: f64 = StandardNormal.sample(rng);
        x[0] = theta[0] + self.params.initial_var().sqrt() * z;
    }

    fn transition(&self, theta: &[f64], x: &mut [f64], _dt: f64, rng: &mut StreamRng) {
        let z: f64 = StandardNormal.sample(rng);
        x[0] = theta[0] + self.params.phi * (x[0] - theta[0]) + self.params.sigma_x * z;
    }

    fn measurement_log_density(&self, y: &[f64], x: &[f64], _theta: &[f64]) -> f64 {
        let v = self.params.sigma_y * self.params.sigma_y;
        -0.5 * (LN_2PI + v.ln() + (y[0] - x[0]) * (y[0] - x[0]) / v)
    }

    fn measurement_y_derivs(&self, y: &[f64], x: &[f64], theta: &[f64]) -> Option<DensityDerivatives<f64>> {
        let v = self.params.sigma_y * self.params.sigma_y;
        Some(DensityDerivatives::univariate(
            self.measurement_log_density(y, x, theta),
            (x[0] - y[0]) / v,
            -1.0 / v,
        ))
    }

    fn sample_measurement(&self, x: &[f64], _theta: &[f64], rng: &mut StreamRng) -> Option<Vec<f64>> {
        let z: f64 = StandardNormal.sample(rng);
        Some(vec![x[0] + self.params.sigma_y * z])
    }

    fn observation_kind(&self) -> ObservationKind {
        ObservationKind::Continuous
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::test_support::check_fd;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn measurement_examples() {
        let m = LgssmModel::new(0.5, 1.0, 0.5, 1.0).unwrap();
        let d = m.measurement_y_derivs(&[0.3], &[0.3], &[0.0]).unwrap();
        assert_eq!(d.grad_log[0], 0.0);
        assert_eq!(d.lap_log, -4.0);
        assert!((m.params().stationary_var() - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let m = LgssmModel::new(0.8, 0.5, 0.7, 4.0).unwrap();
        let mut rng = stream(2, &[]);
        for _ in 0..100 {
            let y = [rng.random_range(-3.0..3.0)];
            let x = [rng.random_range(-3.0..3.0)];
            let th = [rng.random_range(-2.0..2.0)];
            check_fd(|y| m.measurement_log_density(y, &x, &th), &y, &m.measurement_y_derivs(&y, &x, &th).unwrap());
        }
    }

    #[test]
    fn stationary_simulation_variance() {
        let m = LgssmModel::new(0.5, 1.0, 1.0, 1.0).unwrap();
        let mut rng = stream(3, &[]);
        let mut x = [0.0];
        m.sample_initial(&[2.0], &mut x, &mut rng);
        let n = 200_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            m.transition(&[2.0], &mut x, 1.0, &mut rng);
            s += x[0];
            s2 += x[0] * x[0];
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!((mean - 2.0).abs() < 0.02, "{mean}");
        assert!((var - 4.0 / 3.0).abs() < 0.03, "{var}");
    }
}
