//! Gaussian-kernel density estimates of univariate predictive densities,
//! with exact first and second derivatives of the kernel sum.

use crate::error::{invalid, Error, Result};
use crate::num::Real;
use crate::scoring::{hscore_increment_from_derivs, DensityDerivatives, ScoreIncrement};

/// Draws `ŷ⁽ⁱ⁾` and bandwidth `h` of the estimator
/// `p̂(y) = (n h)⁻¹ Σ K((y - ŷ⁽ⁱ⁾) / h)`, optionally with kernel weights.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeEstimate<T> {
    draws: Vec<T>,
    bandwidth: T,
    kernel_weights: Option<Vec<T>>,
}

impl<T: Real> KdeEstimate<T> {
    pub fn new(draws: Vec<T>, bandwidth: T) -> Result<Self> {
        if !(bandwidth > T::zero()) || !bandwidth.is_finite() {
            return Err(invalid("bandwidth must be positive"));
        }
        if draws.is_empty() {
            return Err(invalid("kernel density estimate needs at least one draw"));
        }
        if draws.iter().any(|d| !d.is_finite()) {
            return Err(invalid("non-finite draw"));
        }
        Ok(Self {
            draws,
            bandwidth,
            kernel_weights: None,
        })
    }

    /// Weighted variant `p̂(y) = Σ c_i K((y - ŷ⁽ⁱ⁾)/h) / (h Σ c_i)`.
    pub fn with_weights(draws: Vec<T>, bandwidth: T, weights: Vec<T>) -> Result<Self> {
        let mut est = Self::new(draws, bandwidth)?;
        if weights.len() != est.draws.len() {
            return Err(invalid("one kernel weight per draw required"));
        }
        if weights.iter().any(|w| !(*w >= T::zero()) || !w.is_finite())
            || weights.iter().all(|w| *w == T::zero())
        {
            return Err(invalid("kernel weights must be non-negative, not all zero"));
        }
        est.kernel_weights = Some(weights);
        Ok(est)
    }

    pub fn draws(&self) -> &[T] {
        &self.draws
    }

    pub fn bandwidth(&self) -> T {
        self.bandwidth
    }

    fn log_weight(&self, i: usize) -> T {
        match &self.kernel_weights {
            Some(w) => w[i].ln(),
            None => T::zero(),
        }
    }

    fn log_total_weight(&self) -> T {
        match &self.kernel_weights {
            Some(w) => w.iter().copied().sum::<T>().ln(),
            None => T::from_count(self.draws.len()).ln(),
        }
    }

    /// `p̂(y)`, `p̂'(y)` and `p̂''(y)` in linear scale.
    pub fn density_and_derivatives(&self, y: T) -> (T, T, T) {
        let h = self.bandwidth;
        let norm = (T::lit(2.0) * T::PI()).sqrt() * h * self.log_total_weight().exp();
        let (mut p, mut p1, mut p2) = (T::zero(), T::zero(), T::zero());
        for (i, &d) in self.draws.iter().enumerate() {
            let u = (y - d) / h;
            let k = (self.log_weight(i) - u * u / T::lit(2.0)).exp();
            p = p + k;
            p1 = p1 - k * u / h;
            p2 = p2 + k * (u * u - T::one()) / (h * h);
        }
        (p / norm, p1 / norm, p2 / norm)
    }
}

/// Log-density of the estimate at `y` and its first and second log-derivatives
/// `p̂'/p̂` and `p̂''/p̂ - (p̂'/p̂)²`.
///
/// Evaluated through softmax weights over the kernels, so the derivatives
/// stay finite far in the tails; an error is raised once `p̂(y)` itself
/// underflows the smallest positive normal value.
pub fn kde_logdensity_and_derivs<T: Real>(est: &KdeEstimate<T>, y: T) -> Result<DensityDerivatives<T>> {
    if !y.is_finite() {
        return Err(invalid("non-finite evaluation point"));
    }
    let h = est.bandwidth;
    let n = est.draws.len();
    let mut logk = Vec::with_capacity(n);
    let mut max = T::neg_infinity();
    for (i, &d) in est.draws.iter().enumerate() {
        let u = (y - d) / h;
        let v = est.log_weight(i) - u * u / T::lit(2.0);
        max = max.max(v);
        logk.push(v);
    }
    let log_norm = T::lit(0.5) * (T::lit(2.0) * T::PI()).ln() + h.ln() + est.log_total_weight();
    let (mut s, mut s1, mut s2) = (T::zero(), T::zero(), T::zero());
    for (&d, &v) in est.draws.iter().zip(&logk) {
        let e = (v - max).exp();
        let u = (y - d) / h;
        s = s + e;
        s1 = s1 + e * u;
        s2 = s2 + e * u * u;
    }
    let log_density = max + s.ln() - log_norm;
    if !(log_density >= T::min_positive_value().ln()) {
        return Err(Error::OutOfSupport(format!(
            "kernel density underflows at y = {y}"
        )));
    }
    let mean_u = s1 / s;
    let mean_u2 = s2 / s;
    let grad = -mean_u / h;
    let second_over_p = (mean_u2 - T::one()) / (h * h);
    let lap = second_over_p - grad * grad;
    Ok(DensityDerivatives::univariate(log_density, grad, lap))
}

/// Diagnostics of a KDE-based increment.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KdeDiagnostics {
    /// θ-particles dropped because their density underflowed at `y_t`.
    pub excluded: usize,
    /// More than 10% of the θ-particles were dropped.
    pub unreliable: bool,
}

/// Posterior plug-in of the H-score summand with per-θ kernel estimates of
/// `p(y_t | y_{1:t-1}, θ)`. Underflowing θ-particles are excluded and the
/// remaining weights renormalized.
pub fn kde_hscore_increment<T: Real>(
    per_theta: &[KdeEstimate<T>],
    theta_weights: &[T],
    y: T,
) -> Result<(ScoreIncrement<T>, KdeDiagnostics)> {
    if per_theta.len() != theta_weights.len() || per_theta.is_empty() {
        return Err(invalid("one estimate per θ weight required"));
    }
    let mut kept_w = Vec::with_capacity(per_theta.len());
    let mut kept_d = Vec::with_capacity(per_theta.len());
    let mut excluded = 0usize;
    for (est, &w) in per_theta.iter().zip(theta_weights) {
        if w == T::zero() {
            continue;
        }
        match kde_logdensity_and_derivs(est, y) {
            Ok(d) => {
                kept_w.push(w);
                kept_d.push(d);
            }
            Err(Error::OutOfSupport(_)) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    if kept_w.is_empty() {
        return Err(Error::Scoring(format!(
            "every kernel estimate underflows at y = {y}"
        )));
    }
    let total: T = kept_w.iter().copied().sum();
    let renorm: Vec<T> = kept_w.iter().map(|&w| w / total).collect();
    let inc = hscore_increment_from_derivs(&renorm, &kept_d)?;
    let unreliable = T::from_count(excluded) > T::lit(0.1) * T::from_count(per_theta.len());
    Ok((inc, KdeDiagnostics { excluded, unreliable }))
}
