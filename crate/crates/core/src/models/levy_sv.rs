//! Stochastic volatility driven by a Lévy (Gamma-OU) process.

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Poisson, StandardNormal};

use super::{ObservationKind, SsmModel};
use crate::error::{invalid, Result};
use crate::rng::StreamRng;
use crate::scoring::DensityDerivatives;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Above this expected number of jumps per unit interval the jump sum is
/// generated bin by bin instead of jump by jump.
const EXACT_JUMP_LIMIT: f64 = 1e4;
const JUMP_BINS: usize = 64;

/// One unit-interval step of the volatility recursion given explicit jumps:
/// `offsets[j] = t - C_j ∈ (0, 1)` and sizes `E_j`.
///
/// Returns `(V_t, Z_t)` with `Z_t = e^{-λ} Z_{t-1} + Σ e^{-λ (t - C_j)} E_j`
/// and `V_t = (Z_{t-1} - Z_t + Σ E_j) / λ`, the latter evaluated in the
/// algebraically equal form `(Z_{t-1}(1-e^{-λ}) + Σ E_j (1-e^{-λ(t-C_j)})) / λ`
/// to avoid cancellation.
pub fn levy_sv_step_with_jumps(z_prev: f64, lambda: f64, offsets: &[f64], sizes: &[f64]) -> (f64, f64) {
    let decay = (-lambda).exp();
    let mut z = decay * z_prev;
    let mut v = -(-lambda).exp_m1() * z_prev;
    for (&u, &e) in offsets.iter().zip(sizes) {
        z += (-lambda * u).exp() * e;
        v += -(-lambda * u).exp_m1() * e;
    }
    (v / lambda, z)
}

/// Draws `(V_t, Z_t)` given `Z_{t-1}`: `k ~ Poisson(λξ²/ω²)` jumps at uniform
/// times in the unit interval with `Exp(ξ/ω²)` sizes.
pub fn levy_sv_transition<R: Rng + ?Sized>(
    z_prev: f64,
    lambda: f64,
    xi: f64,
    omega_sq: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if !(lambda > 0.0 && xi > 0.0 && omega_sq > 0.0) {
        return Err(invalid("λ, ξ and ω² must be positive"));
    }
    Ok(transition_unchecked(z_prev, lambda, xi, omega_sq, rng))
}

fn poisson<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    if !(rate > 0.0) {
        return 0.0;
    }
    match Poisson::new(rate.min(1e18)) {
        Ok(p) => p.sample(rng),
        Err(_) => 0.0,
    }
}

fn transition_unchecked<R: Rng + ?Sized>(z_prev: f64, lambda: f64, xi: f64, omega_sq: f64, rng: &mut R) -> (f64, f64) {
    let rate = lambda * xi * xi / omega_sq;
    let size_rate = xi / omega_sq;
    let decay = (-lambda).exp();
    let mut z = decay * z_prev;
    let mut v = -(-lambda).exp_m1() * z_prev;
    if rate <= EXACT_JUMP_LIMIT {
        let k = poisson(rate, rng) as usize;
        if k > 0 {
            let exp = Exp::new(size_rate).expect("positive rate");
            for _ in 0..k {
                let u: f64 = rng.random();
                let e = exp.sample(rng);
                z += (-lambda * u).exp() * e;
                v += -(-lambda * u).exp_m1() * e;
            }
        }
    } else {
        // per-bin jump counts are independent Poisson(rate / bins); the sum
        // of n Exp(β) sizes is Gamma(n, β); discount at the bin midpoint
        let w = 1.0 / JUMP_BINS as f64;
        for b in 0..JUMP_BINS {
            let n = poisson(rate * w, rng);
            if n > 0.0 {
                let e = Gamma::new(n, 1.0 / size_rate).expect("positive shape").sample(rng);
                let u = (b as f64 + 0.5) * w;
                z += (-lambda * u).exp() * e;
                v += -(-lambda * u).exp_m1() * e;
            }
        }
    }
    (v / lambda, z)
}

fn stationary_z<R: Rng + ?Sized>(xi: f64, omega_sq: f64, rng: &mut R) -> f64 {
    let shape = xi * xi / omega_sq;
    let rate = xi / omega_sq;
    match Gamma::new(shape, 1.0 / rate) {
        Ok(g) => g.sample(rng),
        Err(_) => xi,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevySvVariant {
    /// θ = (λ, ξ, ω², μ, β), x = (V, Z).
    OneFactor,
    /// θ = (λ₁, λ₂ - λ₁, ξ, ω², w, μ, β), x = (V₁, V₂, Z₁, Z₂); factor i
    /// uses (λ_i, ξ w_i, ω w_i) with (w₁, w₂) = (w, 1 - w).
    TwoFactor,
}

/// Observations `y_t | x_t ~ N(μ + β V_t, V_t)` with the integrated
/// volatility `V_t` of one or two superposed Gamma-OU factors.
#[derive(Debug, Clone)]
pub struct LevySvModel {
    variant: LevySvVariant,
}

fn exp_log_pdf(x: f64, rate: f64) -> f64 {
    if x > 0.0 {
        rate.ln() - rate * x
    } else {
        f64::NEG_INFINITY
    }
}

fn normal10_log_pdf(x: f64) -> f64 {
    -0.5 * (LN_2PI + 10f64.ln() + x * x / 10.0)
}

impl LevySvModel {
    pub fn new(variant: LevySvVariant) -> Self {
        Self { variant }
    }

    pub fn variant(&self) -> LevySvVariant {
        self.variant
    }

    /// Factor parameters `(λ_i, ξ_i, ω_i²)`.
    fn factors(&self, theta: &[f64]) -> Vec<(f64, f64, f64)> {
        match self.variant {
            LevySvVariant::OneFactor => vec![(theta[0], theta[1], theta[2])],
            LevySvVariant::TwoFactor => {
                let (l1, dl, xi, om2, w) = (theta[0], theta[1], theta[2], theta[3], theta[4]);
                vec![(l1, xi * w, om2 * w * w), (l1 + dl, xi * (1.0 - w), om2 * (1.0 - w) * (1.0 - w))]
            }
        }
    }

    fn mu_beta(&self, theta: &[f64]) -> (f64, f64) {
        let n = theta.len();
        (theta[n - 2], theta[n - 1])
    }

    fn n_factors(&self) -> usize {
        match self.variant {
            LevySvVariant::OneFactor => 1,
            LevySvVariant::TwoFactor => 2,
        }
    }

    /// Total integrated volatility of a state.
    pub fn volatility(&self, x: &[f64]) -> f64 {
        x[..self.n_factors()].iter().sum()
    }

    fn advance(&self, theta: &[f64], x: &mut [f64], rng: &mut StreamRng) {
        let nf = self.n_factors();
        for (i, (l, xi, om2)) in self.factors(theta).into_iter().enumerate() {
            if l > 0.0 && xi > 0.0 && om2 > 0.0 {
                let (v, z) = transition_unchecked(x[nf + i], l, xi, om2, rng);
                x[i] = v;
                x[nf + i] = z;
            } else {
                x[i] = 0.0;
                x[nf + i] = 0.0;
            }
        }
    }
}

impl SsmModel for LevySvModel {
    fn name(&self) -> &str {
        match self.variant {
            LevySvVariant::OneFactor => "sv-m1",
            LevySvVariant::TwoFactor => "sv-m2",
        }
    }

    fn param_names(&self) -> Vec<String> {
        let names: &[&str] = match self.variant {
            LevySvVariant::OneFactor => &["lambda", "xi", "omega_sq", "mu", "beta"],
            LevySvVariant::TwoFactor => &["lambda1", "lambda_gap", "xi", "omega_sq", "w", "mu", "beta"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    fn dim_theta(&self) -> usize {
        match self.variant {
            LevySvVariant::OneFactor => 5,
            LevySvVariant::TwoFactor => 7,
        }
    }

    fn dim_x(&self) -> usize {
        2 * self.n_factors()
    }

    fn dim_y(&self) -> usize {
        1
    }

    fn prior_log_density(&self, theta: &[f64]) -> f64 {
        match self.variant {
            LevySvVariant::OneFactor => {
                exp_log_pdf(theta[0], 1.0)
                    + exp_log_pdf(theta[1], 0.2)
                    + exp_log_pdf(theta[2], 0.2)
                    + normal10_log_pdf(theta[3])
                    + normal10_log_pdf(theta[4])
            }
            LevySvVariant::TwoFactor => {
                let w = theta[4];
                if !(w > 0.0 && w < 1.0) {
                    return f64::NEG_INFINITY;
                }
                exp_log_pdf(theta[0], 1.0)
                    + exp_log_pdf(theta[1], 0.5)
                    + exp_log_pdf(theta[2], 0.2)
                    + exp_log_pdf(theta[3], 0.2)
                    + normal10_log_pdf(theta[5])
                    + normal10_log_pdf(theta[6])
            }
        }
    }

    fn sample_prior(&self, rng: &mut StreamRng) -> Option<Vec<f64>> {
        let exp = |rate: f64, rng: &mut StreamRng| Exp::new(rate).expect("positive rate").sample(rng);
        let n10 = |rng: &mut StreamRng| 10f64.sqrt() * Distribution::<f64>::sample(&StandardNormal, rng);
        Some(match self.variant {
            LevySvVariant::OneFactor => {
                vec![exp(1.0, rng), exp(0.2, rng), exp(0.2, rng), n10(rng), n10(rng)]
            }
            LevySvVariant::TwoFactor => vec![
                exp(1.0, rng),
                exp(0.5, rng),
                exp(0.2, rng),
                exp(0.2, rng),
                rng.random(),
                n10(rng),
                n10(rng),
            ],
        })
    }

    fn sample_initial(&self, theta: &[f64], x: &mut [f64], rng: &mut StreamRng) {
        let nf = self.n_factors();
        for (i, (_, xi, om2)) in self.factors(theta).into_iter().enumerate() {
            x[nf + i] = if xi > 0.0 && om2 > 0.0 {
                stationary_z(xi, om2, rng)
            } else {
                0.0
            };
        }
        self.advance(theta, x, rng);
    }

    fn transition(&self, theta: &[f64], x: &mut [f64], _dt: f64, rng: &mut StreamRng) {
        self.advance(theta, x, rng);
    }

    fn measurement_log_density(&self, y: &[f64], x: &[f64], theta: &[f64]) -> f64 {
        let v = self.volatility(x);
        if !(v > 0.0) || !v.is_finite() {
            return f64::NEG_INFINITY;
        }
        let (mu, beta) = self.mu_beta(theta);
        let r = y[0] - mu - beta * v;
        -0.5 * (LN_2PI + v.ln() + r * r / v)
    }

    fn measurement_y_derivs(&self, y: &[f64], x: &[f64], theta: &[f64]) -> Option<DensityDerivatives<f64>> {
        let v = self.volatility(x);
        if !(v > 0.0) || !v.is_finite() {
            return None;
        }
        let (mu, beta) = self.mu_beta(theta);
        Some(DensityDerivatives::univariate(
            self.measurement_log_density(y, x, theta),
            -(y[0] - mu - beta * v) / v,
            -1.0 / v,
        ))
    }

    fn sample_measurement(&self, x: &[f64], theta: &[f64], rng: &mut StreamRng) -> Option<Vec<f64>> {
        let v = self.volatility(x);
        if !(v >= 0.0) || !v.is_finite() {
            return None;
        }
        let (mu, beta) = self.mu_beta(theta);
        let z: f64 = StandardNormal.sample(rng);
        Some(vec![mu + beta * v + v.sqrt() * z])
    }

    fn observation_kind(&self) -> ObservationKind {
        ObservationKind::Continuous
    }
}
