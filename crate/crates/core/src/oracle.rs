//! Closed-form predictives: conjugate Normal models and Kalman filters.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::num::{ln_gamma, Real};
use crate::scoring::{hyvarinen_point, DensityDerivatives, ScoreIncrement};
use crate::trace::{PrequentialTrace, StepDiagnostics};

/// Normal one-step predictive `N(mean, variance)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPredictive<T> {
    pub mean: T,
    pub variance: T,
}

impl<T: Real> GaussianPredictive<T> {
    pub fn new(mean: T, variance: T) -> Result<Self> {
        if !(variance > T::zero()) || !variance.is_finite() || !mean.is_finite() {
            return Err(invalid(format!("invalid Normal predictive N({mean}, {variance})")));
        }
        Ok(Self { mean, variance })
    }

    pub fn log_pdf(&self, y: T) -> T {
        let r = y - self.mean;
        -T::lit(0.5) * ((T::lit(2.0) * T::PI() * self.variance).ln() + r * r / self.variance)
    }

    pub fn derivs(&self, y: T) -> DensityDerivatives<T> {
        DensityDerivatives::univariate(
            self.log_pdf(y),
            -(y - self.mean) / self.variance,
            -T::one() / self.variance,
        )
    }
}

/// Predictive of `y_t` given `y_prefix = y_{1:t-1}` under `y ~ N(θ, 1)`,
/// `θ ~ N(0, σ₀²)`. `sigma0_sq = ∞` gives the flat-prior limit, which needs
/// a nonempty prefix.
pub fn conjugate_m1_predictive<T: Real>(y_prefix: &[T], sigma0_sq: T) -> Result<GaussianPredictive<T>> {
    if !(sigma0_sq > T::zero()) {
        return Err(invalid("prior variance must be positive"));
    }
    let t = T::from_count(y_prefix.len());
    let post_var = T::one() / (t + T::one() / sigma0_sq);
    let post_mean = post_var * y_prefix.iter().copied().sum::<T>();
    GaussianPredictive::new(post_mean, post_var + T::one())
}

/// Scaled Student-t predictive of `y_t` under `y ~ N(0, θ)`,
/// `θ ~ Inv-χ²(ν₀, s₀²)`: `ν = ν₀ + t - 1` degrees of freedom and scale²
/// `(ν₀ s₀² + Σ y²) / ν`. Returns log-density and exact y-derivatives.
pub fn conjugate_m2_predictive_logpdf_and_derivs<T: Real>(
    y_prefix: &[T],
    nu0: T,
    s0_sq: T,
    y: T,
) -> Result<DensityDerivatives<T>> {
    if !(nu0 > T::zero()) || !(s0_sq > T::zero()) {
        return Err(invalid("Inv-χ² hyperparameters must be positive"));
    }
    let nu = nu0 + T::from_count(y_prefix.len());
    let nu_s2 = nu0 * s0_sq + y_prefix.iter().map(|&v| v * v).sum::<T>();
    let half = T::lit(0.5);
    let q = nu_s2 + y * y;
    let log_density = ln_gamma((nu + T::one()) * half) - ln_gamma(nu * half)
        - half * (T::PI() * nu_s2).ln()
        - (nu + T::one()) * half * (q / nu_s2).ln();
    let grad = -(nu + T::one()) * y / q;
    let lap = -(nu + T::one()) * (nu_s2 - y * y) / (q * q);
    Ok(DensityDerivatives::univariate(log_density, grad, lap))
}

/// Linear-Gaussian state-space parameters:
/// `x_{t+1} = μ + φ (x_t - μ) + σ_x ε`, `y_t = x_t + σ_y η`.
///
/// `x_1 ~ N(μ, σ_x²/(1-φ²))` unless `init_var` overrides the variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LgssmParams<T> {
    pub phi: T,
    pub sigma_x: T,
    pub sigma_y: T,
    pub mu: T,
    pub init_var: Option<T>,
}

impl<T: Real> LgssmParams<T> {
    pub fn new(phi: T, sigma_x: T, sigma_y: T) -> Result<Self> {
        let p = Self {
            phi,
            sigma_x,
            sigma_y,
            mu: T::zero(),
            init_var: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi.abs() < T::one()) {
            return Err(invalid("|phi| must be < 1"));
        }
        if !(self.sigma_x >= T::zero()) || !(self.sigma_y > T::zero()) {
            return Err(invalid("noise scales must be non-negative (σ_y positive)"));
        }
        if let Some(v) = self.init_var {
            if !(v >= T::zero()) {
                return Err(invalid("initial variance must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn stationary_var(&self) -> T {
        self.sigma_x * self.sigma_x / (T::one() - self.phi * self.phi)
    }

    pub fn initial_var(&self) -> T {
        self.init_var.unwrap_or_else(|| self.stationary_var())
    }
}

/// Exact one-step predictives of every `y_t` for known parameters.
pub fn kalman_predictives<T: Real>(params: &LgssmParams<T>, data: &[T]) -> Result<Vec<GaussianPredictive<T>>> {
    params.validate()?;
    let s2y = params.sigma_y * params.sigma_y;
    let s2x = params.sigma_x * params.sigma_x;
    let mut m = params.mu;
    let mut p = params.initial_var();
    let mut out = Vec::with_capacity(data.len());
    for &y in data {
        let pred = GaussianPredictive::new(m, p + s2y)?;
        out.push(pred);
        let k = p / (p + s2y);
        let mf = m + k * (y - m);
        let pf = (T::one() - k) * p;
        m = params.mu + params.phi * (mf - params.mu);
        p = params.phi * params.phi * pf + s2x;
    }
    Ok(out)
}

/// Exact predictive of `y_t` given `y_prefix = y_{1:t-1}` for known parameters.
pub fn kalman_predictive<T: Real>(params: &LgssmParams<T>, y_prefix: &[T]) -> Result<GaussianPredictive<T>> {
    let mut ext = y_prefix.to_vec();
    ext.push(T::zero());
    Ok(*kalman_predictives(params, &ext)?.last().expect("nonempty"))
}

/// Exact marginal predictives when the level `μ` is unknown with prior
/// `N(prior_mean, prior_var)`; Kalman filter on the augmented state `(x, μ)`.
/// `params.mu` is ignored.
pub fn lgssm_level_predictives<T: Real>(
    params: &LgssmParams<T>,
    prior_mean: T,
    prior_var: T,
    data: &[T],
) -> Result<Vec<GaussianPredictive<T>>> {
    params.validate()?;
    if !(prior_var > T::zero()) {
        return Err(invalid("prior variance must be positive"));
    }
    let s2y = params.sigma_y * params.sigma_y;
    let s2x = params.sigma_x * params.sigma_x;
    let phi = params.phi;
    let (mut mx, mut mm) = (prior_mean, prior_mean);
    let (mut pxx, mut pxm, mut pmm) = (prior_var + params.initial_var(), prior_var, prior_var);
    let mut out = Vec::with_capacity(data.len());
    for &y in data {
        let s = pxx + s2y;
        out.push(GaussianPredictive::new(mx, s)?);
        let (kx, km) = (pxx / s, pxm / s);
        let r = y - mx;
        mx = mx + kx * r;
        mm = mm + km * r;
        let (fxx, fxm, fmm) = (pxx - kx * kx * s, pxm - kx * km * s, pmm - km * km * s);
        // propagate with F = [[φ, 1-φ], [0, 1]], Q = diag(σ_x², 0)
        let a = T::one() - phi;
        mx = phi * mx + a * mm;
        pxx = phi * phi * fxx + T::lit(2.0) * phi * a * fxm + a * a * fmm + s2x;
        pxm = phi * fxm + a * fmm;
        pmm = fmm;
    }
    Ok(out)
}

/// Trace of exact log-score and H-score increments from univariate predictive
/// log-derivatives, one per observation.
pub fn trace_from_derivs<T: Real>(derivs: &[DensityDerivatives<T>], first_proper_index: usize) -> Result<PrequentialTrace<T>> {
    let mut trace = PrequentialTrace::new(first_proper_index);
    for d in derivs {
        let h = hyvarinen_point(d)?;
        let inc = ScoreIncrement {
            per_dim_d1: d.grad_log.clone(),
            per_dim_d2: vec![d.lap_log],
            value: h,
        };
        trace.push(d.log_density, Some(inc), StepDiagnostics::default());
    }
    Ok(trace)
}

/// Hyperparameters of the Normal location (M1) and scale (M2) models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalHyper {
    pub sigma0_sq: f64,
    pub nu0: f64,
    pub s0_sq: f64,
}

impl Default for NormalHyper {
    fn default() -> Self {
        Self {
            sigma0_sq: 10.0,
            nu0: 0.1,
            s0_sq: 1.0,
        }
    }
}

/// Exact prequential traces of the Normal location model (M1) and Normal
/// scale model (M2).
///
/// With `sigma0_sq = ∞` (flat prior on the location) the M1 trace starts its
/// log-evidence at `t = 2`; its first H increment is the flat-prior limit 0.
pub fn exact_prequential_scores_m1_m2<T: Real>(data: &[T], hyper: &NormalHyper) -> Result<(PrequentialTrace<T>, PrequentialTrace<T>)> {
    let sigma0_sq = T::lit(hyper.sigma0_sq);
    let flat = sigma0_sq.is_infinite();
    let mut d1 = Vec::with_capacity(data.len());
    for t in 0..data.len() {
        if flat && t == 0 {
            d1.push(DensityDerivatives::univariate(T::zero(), T::zero(), T::zero()));
            continue;
        }
        d1.push(conjugate_m1_predictive(&data[..t], sigma0_sq)?.derivs(data[t]));
    }
    let m1 = trace_from_derivs(&d1, usize::from(flat))?;
    let mut d2 = Vec::with_capacity(data.len());
    for t in 0..data.len() {
        d2.push(conjugate_m2_predictive_logpdf_and_derivs(
            &data[..t],
            T::lit(hyper.nu0),
            T::lit(hyper.s0_sq),
            data[t],
        )?);
    }
    let m2 = trace_from_derivs(&d2, 0)?;
    Ok((m1, m2))
}

/// Exact trace of the linear-Gaussian model with unknown level `μ`.
pub fn exact_lgssm_trace<T: Real>(params: &LgssmParams<T>, prior_var: T, data: &[T]) -> Result<PrequentialTrace<T>> {
    let preds = lgssm_level_predictives(params, T::zero(), prior_var, data)?;
    let derivs: Vec<_> = preds.iter().zip(data).map(|(p, &y)| p.derivs(y)).collect();
    trace_from_derivs(&derivs, 0)
}
