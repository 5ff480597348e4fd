//! Population diffusions observed through negative binomial counts.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};

use super::{ObservationKind, SsmModel};
use crate::error::{invalid, Result};
use crate::num::ln_gamma;
use crate::rng::StreamRng;
use crate::scoring::{DensityDerivatives, DiscreteSupport};

/// Lower bound applied to the latent population size after every step.
pub const STATE_FLOOR: f64 = 1e-8;
/// Upper bound on `log X`, keeping explosive prior draws finite.
const LOG_STATE_CEILING: f64 = 700.0;
const LOG_VAR_INIT: f64 = 5.0;

/// Log-pmf of `NB(m, m + τ m²)` at `k`, i.e. size `r = 1/τ` and success
/// probability `p = τm / (1 + τm)` in `C(k+r-1, k) (1-p)^r p^k`.
pub fn nb_log_pmf(k: i64, m: f64, tau: f64) -> f64 {
    if k < 0 || !(m > 0.0) || !(tau > 0.0) {
        return f64::NEG_INFINITY;
    }
    let r = 1.0 / tau;
    let kf = k as f64;
    let log1p_tm = (tau * m).ln_1p();
    ln_gamma(kf + r) - ln_gamma(r) - ln_gamma(kf + 1.0) - r * log1p_tm + kf * ((tau * m).ln() - log1p_tm)
}

/// Draws from `NB(m, m + τ m²)` as a Gamma-Poisson mixture.
pub fn nb_sample<R: Rng + ?Sized>(m: f64, tau: f64, rng: &mut R) -> u64 {
    if !(m > 0.0) || !(tau > 0.0) {
        return 0;
    }
    let rate = match Gamma::new(1.0 / tau, tau * m) {
        Ok(g) => g.sample(rng),
        Err(_) => m,
    };
    if !(rate > 0.0) {
        return 0;
    }
    match Poisson::new(rate.min(1e15)) {
        Ok(p) => p.sample(rng) as u64,
        Err(_) => 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KangarooVariant {
    /// θ = (σ, τ, b, r): logistic diffusion.
    Logistic,
    /// θ = (σ, τ, r): exponential growth (b = 0).
    Exponential,
    /// θ = (σ, τ): random walk on the log scale (b = r = 0).
    RandomWalk,
}

/// Latent size `dX/X = (σ²/2 + r - bX) dt + σ dW`, `X₁ ~ LN(0, 5)`, with two
/// conditionally independent counts `NB(X, X + τX²)` per observation time.
///
/// The logistic variant is discretized by Euler–Maruyama on `log X` with
/// `⌈gap/Δt⌉` equal substeps; without density dependence the log-scale
/// dynamics are Brownian with drift and are simulated exactly.
#[derive(Debug, Clone)]
pub struct KangarooModel {
    variant: KangarooVariant,
    delta_t: f64,
    growth_bound: f64,
}

struct Params {
    sigma: f64,
    tau: f64,
    b: f64,
    r: f64,
}

impl KangarooModel {
    pub const DEFAULT_GROWTH_BOUND: f64 = 10.0;

    pub fn new(variant: KangarooVariant, delta_t: f64) -> Result<Self> {
        if !(delta_t > 0.0) || !delta_t.is_finite() {
            return Err(invalid("Euler step must be positive"));
        }
        Ok(Self {
            variant,
            delta_t,
            growth_bound: Self::DEFAULT_GROWTH_BOUND,
        })
    }

    /// Prior `r ~ Unif(-bound, bound)` (default bound 10).
    pub fn with_growth_bound(mut self, bound: f64) -> Result<Self> {
        if !(bound > 0.0) {
            return Err(invalid("growth-rate bound must be positive"));
        }
        if self.variant == KangarooVariant::RandomWalk {
            return Err(invalid("the random-walk variant has no growth rate"));
        }
        self.growth_bound = bound;
        Ok(self)
    }

    pub fn variant(&self) -> KangarooVariant {
        self.variant
    }

    pub fn delta_t(&self) -> f64 {
        self.delta_t
    }

    fn params(&self, theta: &[f64]) -> Params {
        match self.variant {
            KangarooVariant::Logistic => Params {
                sigma: theta[0],
                tau: theta[1],
                b: theta[2],
                r: theta[3],
            },
            KangarooVariant::Exponential => Params {
                sigma: theta[0],
                tau: theta[1],
                b: 0.0,
                r: theta[2],
            },
            KangarooVariant::RandomWalk => Params {
                sigma: theta[0],
                tau: theta[1],
                b: 0.0,
                r: 0.0,
            },
        }
    }
}

impl SsmModel for KangarooModel {
    fn name(&self) -> &str {
        match (self.variant, self.growth_bound == Self::DEFAULT_GROWTH_BOUND) {
            (KangarooVariant::Logistic, _) => "kangaroo-m1",
            (KangarooVariant::Exponential, true) => "kangaroo-m2",
            (KangarooVariant::Exponential, false) => "kangaroo-m2-wide",
            (KangarooVariant::RandomWalk, _) => "kangaroo-m3",
        }
    }

    fn param_names(&self) -> Vec<String> {
        let names: &[&str] = match self.variant {
            KangarooVariant::Logistic => &["sigma", "tau", "b", "r"],
            KangarooVariant::Exponential => &["sigma", "tau", "r"],
            KangarooVariant::RandomWalk => &["sigma", "tau"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    fn dim_theta(&self) -> usize {
        match self.variant {
            KangarooVariant::Logistic => 4,
            KangarooVariant::Exponential => 3,
            KangarooVariant::RandomWalk => 2,
        }
    }

    fn dim_x(&self) -> usize {
        1
    }

    fn dim_y(&self) -> usize {
        2
    }

    fn prior_log_density(&self, theta: &[f64]) -> f64 {
        let unit = |v: f64| if v > 0.0 && v < 10.0 { -(10f64.ln()) } else { f64::NEG_INFINITY };
        let growth = |v: f64| {
            if v > -self.growth_bound && v < self.growth_bound {
                -(2.0 * self.growth_bound).ln()
            } else {
                f64::NEG_INFINITY
            }
        };
        match self.variant {
            KangarooVariant::Logistic => unit(theta[0]) + unit(theta[1]) + unit(theta[2]) + growth(theta[3]),
            KangarooVariant::Exponential => unit(theta[0]) + unit(theta[1]) + growth(theta[2]),
            KangarooVariant::RandomWalk => unit(theta[0]) + unit(theta[1]),
        }
    }

    fn sample_prior(&self, rng: &mut StreamRng) -> Option<Vec<f64>> {
        let mut th: Vec<f64> = (0..self.dim_theta()).map(|_| rng.random_range(0.0..10.0)).collect();
        if self.variant != KangarooVariant::RandomWalk {
            let last = th.len() - 1;
            th[last] = rng.random_range(-self.growth_bound..self.growth_bound);
        }
        Some(th)
    }

    fn sample_initial(&self, _theta: &[f64], x: &mut [f64], rng: &mut StreamRng) {
        let z: f64 = StandardNormal.sample(rng);
        x[0] = (LOG_VAR_INIT.sqrt() * z).exp().max(STATE_FLOOR);
    }

    fn transition(&self, theta: &[f64], x: &mut [f64], dt: f64, rng: &mut StreamRng) {
        if !(dt > 0.0) {
            return;
        }
        let p = self.params(theta);
        let mut lx = x[0].max(STATE_FLOOR).ln();
        if p.b == 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            lx += p.r * dt + p.sigma * dt.sqrt() * z;
        } else {
            let n = (dt / self.delta_t).ceil().max(1.0) as usize;
            let h = dt / n as f64;
            let sh = h.sqrt();
            for _ in 0..n {
                let z: f64 = StandardNormal.sample(rng);
                let xv = lx.exp();
                lx += (p.r - p.b * xv) * h + p.sigma * sh * z;
                lx = lx.clamp(STATE_FLOOR.ln(), LOG_STATE_CEILING);
            }
        }
        lx = lx.min(LOG_STATE_CEILING);
        x[0] = if lx.is_nan() { STATE_FLOOR } else { lx.exp().max(STATE_FLOOR) };
    }

    fn measurement_log_density(&self, y: &[f64], x: &[f64], theta: &[f64]) -> f64 {
        let tau = self.params(theta).tau;
        y.iter().map(|&v| nb_log_pmf(v.round() as i64, x[0], tau)).sum()
    }

    fn measurement_y_derivs(&self, _y: &[f64], _x: &[f64], _theta: &[f64]) -> Option<DensityDerivatives<f64>> {
        None
    }

    fn sample_measurement(&self, x: &[f64], theta: &[f64], rng: &mut StreamRng) -> Option<Vec<f64>> {
        let tau = self.params(theta).tau;
        Some((0..2).map(|_| nb_sample(x[0], tau, rng) as f64).collect())
    }

    fn observation_kind(&self) -> ObservationKind {
        ObservationKind::Discrete(DiscreteSupport::counts(2))
    }

    fn measurement_coord_log_pmf(&self, _k: usize, value: i64, x: &[f64], theta: &[f64]) -> Option<f64> {
        Some(nb_log_pmf(value, x[0], self.params(theta).tau))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;

    #[test]
    fn nb_moments_by_enumeration() {
        // (m, v) = (4, 8): τ = (v - m) / m² = 0.25
        let (m, tau) = (4.0, 0.25);
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for k in 0..2000 {
            let p = nb_log_pmf(k, m, tau).exp();
            s0 += p;
            s1 += p * k as f64;
            s2 += p * (k * k) as f64;
        }
        assert_relative_eq!(s0, 1.0, epsilon = 1e-10);
        assert_relative_eq!(s1, 4.0, epsilon = 1e-9);
        assert_relative_eq!(s2 - s1 * s1, 8.0, epsilon = 1e-8);
    }

    #[test]
    fn printed_success_probability_does_not_match_the_moments() {
        // p = (v - m)/m with r = m²/(v - m) gives mean r p/(1 - p) ≠ m when v ≠ 2m
        let (m, v) = (4.0f64, 6.0f64);
        let r = m * m / (v - m);
        let p_printed = (v - m) / m;
        let p_matching = (v - m) / v;
        assert!((r * p_printed / (1.0 - p_printed) - m).abs() > 1.0);
        assert_relative_eq!(r * p_matching / (1.0 - p_matching), m, epsilon = 1e-12);
        assert_relative_eq!(r * p_matching / (1.0 - p_matching).powi(2), v, epsilon = 1e-12);
    }

    #[test]
    fn nb_sampler_matches_mean_and_variance() {
        let mut rng = stream(1, &[]);
        let (m, tau) = (4.0, 0.25);
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let k = nb_sample(m, tau, &mut rng) as f64;
            s1 += k;
            s2 += k * k;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        // standard errors: √(v/n) ≈ 0.0028 for the mean, ≈ 0.03 for the variance
        assert!((mean - 4.0).abs() < 0.0085, "{mean}");
        assert!((var - 8.0).abs() < 0.1, "{var}");
    }

    #[test]
    fn nb_mass_sums_to_one_with_adaptive_truncation() {
        for &(m, tau) in &[(0.3, 5.0), (50.0, 0.01), (400.0, 0.2), (2.0, 9.0)] {
            let mut total = 0.0;
            let mut k = 0;
            // stop once the running tail bound m·... is small: grow until the
            // pmf is negligible past the mode
            loop {
                let p = nb_log_pmf(k, m, tau).exp();
                total += p;
                k += 1;
                if k as f64 > m && p < 1e-14 && k > 10 {
                    break;
                }
                assert!(k < 10_000_000);
            }
            assert!((total - 1.0).abs() < 1e-8, "m = {m}, τ = {tau}: {total}");
        }
    }

    #[test]
    fn flat_dynamics_keep_the_state_nearly_constant() {
        let m = KangarooModel::new(KangarooVariant::Logistic, 0.01).unwrap();
        let mut rng = stream(2, &[]);
        let mut x = [3.0];
        m.transition(&[1e-6, 1.0, 0.0, 0.0], &mut x, 1.0, &mut rng);
        assert!((x[0] - 3.0).abs() < 1e-4, "{}", x[0]);
    }

    #[test]
    fn euler_paths_stay_positive_and_finite() {
        let mut rng = stream(3, &[]);
        for variant in [KangarooVariant::Logistic, KangarooVariant::Exponential, KangarooVariant::RandomWalk] {
            let m = KangarooModel::new(variant, 0.01).unwrap();
            for _ in 0..20 {
                let th = m.sample_prior(&mut rng).unwrap();
                let mut x = [0.0];
                m.sample_initial(&th, &mut x, &mut rng);
                // 5000 unit gaps of 0.2 → 10⁵ Euler steps per path for M1
                for _ in 0..if variant == KangarooVariant::Logistic { 5000 } else { 500 } {
                    m.transition(&th, &mut x, 0.2, &mut rng);
                    assert!(x[0] >= STATE_FLOOR && x[0].is_finite(), "{th:?}");
                }
            }
        }
    }

    #[test]
    fn growth_bound_widens_the_prior() {
        let narrow = KangarooModel::new(KangarooVariant::Exponential, 0.01).unwrap();
        let wide = narrow.clone().with_growth_bound(100.0).unwrap();
        let th = [1.0, 1.0, 5.0];
        assert_relative_eq!(
            narrow.prior_log_density(&th) - wide.prior_log_density(&th),
            10f64.ln(),
            epsilon = 1e-12
        );
        assert_eq!(narrow.prior_log_density(&[1.0, 1.0, 50.0]), f64::NEG_INFINITY);
        assert!(wide.prior_log_density(&[1.0, 1.0, 50.0]).is_finite());
        assert_eq!(wide.name(), "kangaroo-m2-wide");
    }

    #[test]
    fn observation_kind_is_bivariate_counts() {
        let m = KangarooModel::new(KangarooVariant::RandomWalk, 0.01).unwrap();
        assert_eq!(m.observation_kind(), ObservationKind::Discrete(DiscreteSupport::counts(2)));
        assert!(m.measurement_y_derivs(&[1.0, 2.0], &[3.0], &[1.0, 1.0]).is_none());
    }
}
