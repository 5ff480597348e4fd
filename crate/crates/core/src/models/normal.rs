//! Normal location and scale models.

use rand_distr::{ChiSquared, Distribution, Normal, StandardNormal};

use super::IidModel;
use crate::error::{invalid, Result};
use crate::num::ln_gamma;
use crate::rng::StreamRng;
use crate::scoring::DensityDerivatives;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn normal_log_pdf(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (y - mean) * (y - mean) / var)
}

/// `y | θ ~ N(θ, 1)` with `θ ~ N(0, σ₀²)`, or a flat prior on `θ`.
#[derive(Debug, Clone)]
pub struct NormalLocation {
    sigma0_sq: f64,
}

impl NormalLocation {
    pub fn new(sigma0_sq: f64) -> Result<Self> {
        if !(sigma0_sq > 0.0) || !sigma0_sq.is_finite() {
            return Err(invalid("prior variance must be positive and finite"));
        }
        Ok(Self { sigma0_sq })
    }

    /// Improper flat prior `p(θ) ∝ 1`; the posterior is proper from `t = 1`.
    pub fn flat() -> Self {
        Self {
            sigma0_sq: f64::INFINITY,
        }
    }

    pub fn sigma0_sq(&self) -> f64 {
        self.sigma0_sq
    }
}

impl IidModel for NormalLocation {
    fn name(&self) -> &str {
        if self.sigma0_sq.is_finite() {
            "normal-m1"
        } else {
            "normal-m1-flat"
        }
    }

    fn param_names(&self) -> Vec<String> {
        vec!["mean".into()]
    }

    fn dim_theta(&self) -> usize {
        1
    }

    fn prior_log_density(&self, theta: &[f64]) -> f64 {
        if self.sigma0_sq.is_finite() {
            normal_log_pdf(theta[0], 0.0, self.sigma0_sq)
        } else if theta[0].is_finite() {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    fn sample_prior(&self, rng: &mut StreamRng) -> Option<Vec<f64>> {
        if !self.sigma0_sq.is_finite() {
            return None;
        }
        let z: f64 = StandardNormal.sample(rng);
        Some(vec![self.sigma0_sq.sqrt() * z])
    }

    fn log_likelihood(&self, y: &[f64], theta: &[f64]) -> f64 {
        normal_log_pdf(y[0], theta[0], 1.0)
    }

    fn likelihood_y_derivs(&self, y: &[f64], theta: &[f64]) -> DensityDerivatives<f64> {
        DensityDerivatives::univariate(self.log_likelihood(y, theta), theta[0] - y[0], -1.0)
    }

    fn first_proper_index(&self) -> usize {
        if self.sigma0_sq.is_finite() {
            0
        } else {
            1
        }
    }

    fn sample_observation(&self, theta: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        let z: f64 = StandardNormal.sample(rng);
        vec![theta[0] + z]
    }
}

/// Scaled inverse chi-square distribution `Inv-χ²(ν, s²)`: the law of the
/// inverse of a `Gamma(ν/2, rate s²ν/2)` variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvChiSquared {
    pub nu: f64,
    pub s_sq: f64,
}

impl InvChiSquared {
    pub fn new(nu: f64, s_sq: f64) -> Result<Self> {
        if !(nu > 0.0) || !(s_sq > 0.0) {
            return Err(invalid("Inv-χ² parameters must be positive"));
        }
        Ok(Self { nu, s_sq })
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return f64::NEG_INFINITY;
        }
        let h = self.nu / 2.0;
        h * h.ln() - ln_gamma(h) + h * self.s_sq.ln() - (h + 1.0) * x.ln() - self.nu * self.s_sq / (2.0 * x)
    }

    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        let c: f64 = ChiSquared::new(self.nu).expect("positive degrees of freedom").sample(rng);
        self.nu * self.s_sq / c
    }
}

/// `y | θ ~ N(0, θ)` with `θ ~ Inv-χ²(ν₀, s₀²)`.
#[derive(Debug, Clone)]
pub struct NormalScale {
    prior: InvChiSquared,
}

impl NormalScale {
    pub fn new(nu0: f64, s0_sq: f64) -> Result<Self> {
        Ok(Self {
            prior: InvChiSquared::new(nu0, s0_sq)?,
        })
    }
}

impl IidModel for NormalScale {
    fn name(&self) -> &str {
        "normal-m2"
    }

    fn param_names(&self) -> Vec<String> {
        vec!["variance".into()]
    }

    fn dim_theta(&self) -> usize {
        1
    }

    fn prior_log_density(&self, theta: &[f64]) -> f64 {
        self.prior.log_pdf(theta[0])
    }

    fn sample_prior(&self, rng: &mut StreamRng) -> Option<Vec<f64>> {
        // heavy right tail: redraw the rare non-finite or zero values
        loop {
            let v = self.prior.sample(rng);
            if v.is_finite() && v > 0.0 {
                return Some(vec![v]);
            }
        }
    }

    fn log_likelihood(&self, y: &[f64], theta: &[f64]) -> f64 {
        if !(theta[0] > 0.0) {
            return f64::NEG_INFINITY;
        }
        normal_log_pdf(y[0], 0.0, theta[0])
    }

    fn likelihood_y_derivs(&self, y: &[f64], theta: &[f64]) -> DensityDerivatives<f64> {
        DensityDerivatives::univariate(self.log_likelihood(y, theta), -y[0] / theta[0], -1.0 / theta[0])
    }

    fn sample_observation(&self, theta: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        vec![Normal::new(0.0, theta[0].sqrt()).expect("positive variance").sample(rng)]
    }
}
