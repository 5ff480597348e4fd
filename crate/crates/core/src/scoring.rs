//! Scoring rules: the Hyvärinen score (continuous and discrete), the
//! logarithmic score, posterior plug-in increments and the closed-form
//! divergence gaps of the Normal location/scale pair.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::num::Real;

/// Log-density value and its first and second `y`-derivatives at one point.
///
/// `lap_log` is the Laplacian (sum of the second partials) of the
/// log-density.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityDerivatives<T> {
    pub log_density: T,
    pub grad_log: Vec<T>,
    pub lap_log: T,
}

impl<T: Real> DensityDerivatives<T> {
    pub fn new(log_density: T, grad_log: Vec<T>, lap_log: T) -> Self {
        Self {
            log_density,
            grad_log,
            lap_log,
        }
    }

    /// Univariate convenience constructor.
    pub fn univariate(log_density: T, grad: T, lap: T) -> Self {
        Self::new(log_density, vec![grad], lap)
    }

    pub fn dim(&self) -> usize {
        self.grad_log.len()
    }

    pub fn check_finite(&self) -> Result<()> {
        if !self.lap_log.is_finite() || self.grad_log.iter().any(|g| !g.is_finite()) {
            return Err(invalid("non-finite log-density derivative"));
        }
        Ok(())
    }
}

/// One summand of the prequential H-score.
///
/// `per_dim_d1[k]` and `per_dim_d2[k]` are the first and second
/// log-derivatives of the predictive density along coordinate `k`, and
/// `value = Σ_k (2·d2_k + d1_k²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreIncrement<T> {
    pub per_dim_d1: Vec<T>,
    pub per_dim_d2: Vec<T>,
    pub value: T,
}

impl<T: Real> ScoreIncrement<T> {
    pub fn from_per_dim(per_dim_d1: Vec<T>, per_dim_d2: Vec<T>) -> Self {
        let value = per_dim_d1
            .iter()
            .zip(&per_dim_d2)
            .map(|(&d1, &d2)| T::lit(2.0) * d2 + d1 * d1)
            .sum();
        Self {
            per_dim_d1,
            per_dim_d2,
            value,
        }
    }

    /// Increment carrying only a value (discrete scores, skipped steps).
    pub fn scalar(value: T) -> Self {
        Self {
            per_dim_d1: Vec::new(),
            per_dim_d2: Vec::new(),
            value,
        }
    }

    /// Builds the increment from posterior moments: `mean_d1[k] = E[d1_k]` and
    /// `mean_second = E[Δ log p + ‖∇ log p‖²]`.
    ///
    /// For `d_y > 1` only the total second-order term is known, so it is split
    /// evenly across coordinates; `value` is exact either way.
    pub fn from_moments(mean_d1: Vec<T>, mean_second: T) -> Self {
        let d = T::from_count(mean_d1.len().max(1));
        let sq: T = mean_d1.iter().map(|&m| m * m).sum();
        let residual = (mean_second - sq) / d;
        let per_dim_d2 = mean_d1.iter().map(|_| residual).collect();
        let value = T::lit(2.0) * mean_second - sq;
        Self {
            per_dim_d1: mean_d1,
            per_dim_d2,
            value,
        }
    }
}

/// Hyvärinen score `2 Δ log p(y) + ‖∇ log p(y)‖²`.
pub fn hyvarinen_point<T: Real>(derivs: &DensityDerivatives<T>) -> Result<T> {
    derivs.check_finite()?;
    let sq: T = derivs.grad_log.iter().map(|&g| g * g).sum();
    Ok(T::lit(2.0) * derivs.lap_log + sq)
}

/// Logarithmic score `-log p(y)`.
pub fn log_score_point<T: Real>(log_density: T) -> Result<T> {
    if !log_density.is_finite() {
        return Err(invalid("non-finite log-density"));
    }
    Ok(-log_density)
}

fn check_weights<T: Real>(weights: &[T]) -> Result<()> {
    if weights.is_empty() {
        return Err(invalid("empty sample set"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) {
        return Err(invalid("weights must be finite and non-negative"));
    }
    let total: T = weights.iter().copied().sum();
    if (total - T::one()).abs() > T::normalization_tolerance() {
        return Err(invalid(format!("weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// Posterior plug-in for one summand of the H-score.
///
/// `d1` and `d2` are row-major `N × dim` matrices of the first and second
/// log-derivatives of `p(y_t | θ_i)` along each coordinate, evaluated at
/// posterior draws `θ_i` with normalized `weights`. Per coordinate the
/// predictive second derivative is `E[d2 + d1²] - E[d1]²`.
pub fn hscore_increment_from_posterior<T: Real>(
    weights: &[T],
    d1: &[T],
    d2: &[T],
    dim: usize,
) -> Result<ScoreIncrement<T>> {
    check_weights(weights)?;
    let n = weights.len();
    if dim == 0 || d1.len() != n * dim || d2.len() != n * dim {
        return Err(invalid("derivative matrices do not match weights × dim"));
    }
    let mut mean_d1 = vec![T::zero(); dim];
    let mut mean_second = vec![T::zero(); dim];
    for (i, &w) in weights.iter().enumerate() {
        for k in 0..dim {
            let a = d1[i * dim + k];
            let b = d2[i * dim + k];
            mean_d1[k] = mean_d1[k] + w * a;
            mean_second[k] = mean_second[k] + w * (b + a * a);
        }
    }
    let per_dim_d2 = mean_second
        .iter()
        .zip(&mean_d1)
        .map(|(&s, &m)| s - m * m)
        .collect();
    Ok(ScoreIncrement::from_per_dim(mean_d1, per_dim_d2))
}

/// Same plug-in as [`hscore_increment_from_posterior`], fed directly with
/// per-draw [`DensityDerivatives`]. The Laplacian is spread evenly across
/// coordinates, which leaves the increment value unchanged.
pub fn hscore_increment_from_derivs<T: Real>(
    weights: &[T],
    derivs: &[DensityDerivatives<T>],
) -> Result<ScoreIncrement<T>> {
    if derivs.len() != weights.len() {
        return Err(invalid("one derivative set per weight required"));
    }
    let dim = derivs.first().map(|d| d.dim()).unwrap_or(0);
    let mut d1 = Vec::with_capacity(derivs.len() * dim);
    let mut d2 = Vec::with_capacity(derivs.len() * dim);
    let share = T::from_count(dim.max(1));
    for d in derivs {
        d.check_finite()?;
        if d.dim() != dim {
            return Err(invalid("inconsistent observation dimension"));
        }
        d1.extend_from_slice(&d.grad_log);
        d2.extend(std::iter::repeat_n(d.lap_log / share, dim));
    }
    hscore_increment_from_posterior(weights, &d1, &d2, dim)
}

/// Expectation/variance form of the same summand (univariate):
/// `E_w[H(y, p(·|θ))] + V_w[∂ log p(y|θ) / ∂y]`.
pub fn hscore_increment_variance_form<T: Real>(
    weights: &[T],
    h_samples: &[T],
    d1_samples: &[T],
) -> Result<T> {
    check_weights(weights)?;
    if h_samples.len() != weights.len() || d1_samples.len() != weights.len() {
        return Err(invalid("sample and weight lengths differ"));
    }
    let mean_h: T = weights.iter().zip(h_samples).map(|(&w, &h)| w * h).sum();
    let mean_d1: T = weights.iter().zip(d1_samples).map(|(&w, &d)| w * d).sum();
    let var: T = weights
        .iter()
        .zip(d1_samples)
        .map(|(&w, &d)| w * (d - mean_d1) * (d - mean_d1))
        .sum();
    Ok(mean_h + var)
}

/// Integer bound that may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtInt {
    NegInf,
    Finite(i64),
    PosInf,
}

impl ExtInt {
    fn lt(self, other: ExtInt) -> bool {
        use ExtInt::*;
        match (self, other) {
            (Finite(a), Finite(b)) => a < b,
            (NegInf, NegInf) | (PosInf, PosInf) => false,
            (NegInf, _) | (_, PosInf) => true,
            _ => false,
        }
    }

    fn finite(self) -> Option<i64> {
        match self {
            ExtInt::Finite(v) => Some(v),
            _ => None,
        }
    }
}

/// Product of integer intervals `⟦a_k, b_k⟧`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteSupport {
    pub lower: Vec<ExtInt>,
    pub upper: Vec<ExtInt>,
}

impl DiscreteSupport {
    pub fn new(lower: Vec<ExtInt>, upper: Vec<ExtInt>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(invalid("support bounds must have equal, nonzero length"));
        }
        if lower.iter().zip(&upper).any(|(a, b)| !a.lt(*b)) {
            return Err(invalid("support requires a_k < b_k"));
        }
        Ok(Self { lower, upper })
    }

    /// `⟦0, +∞⟦^dim`, the support of count data.
    pub fn counts(dim: usize) -> Self {
        Self {
            lower: vec![ExtInt::Finite(0); dim],
            upper: vec![ExtInt::PosInf; dim],
        }
    }

    /// `⟦a, b⟧^dim`.
    pub fn bounded(a: i64, b: i64, dim: usize) -> Result<Self> {
        Self::new(vec![ExtInt::Finite(a); dim], vec![ExtInt::Finite(b); dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains_coord(&self, k: usize, v: i64) -> bool {
        let above = match self.lower[k] {
            ExtInt::Finite(a) => v >= a,
            ExtInt::NegInf => true,
            ExtInt::PosInf => false,
        };
        let below = match self.upper[k] {
            ExtInt::Finite(b) => v <= b,
            ExtInt::PosInf => true,
            ExtInt::NegInf => false,
        };
        above && below
    }

    pub fn contains(&self, y: &[i64]) -> bool {
        y.len() == self.dim() && y.iter().enumerate().all(|(k, &v)| self.contains_coord(k, v))
    }

    /// Points `y ± e_k`, `y ± 2e_k` (and `y` itself) that lie in the support:
    /// the only evaluations [`discrete_hscore`] can request.
    pub fn probe_points(&self, y: &[i64]) -> Vec<Vec<i64>> {
        let mut out = vec![y.to_vec()];
        for k in 0..y.len() {
            for off in [-2i64, -1, 1, 2] {
                let mut z = y.to_vec();
                z[k] += off;
                if self.contains_coord(k, z[k]) {
                    out.push(z);
                }
            }
        }
        out
    }
}

/// Position of a coordinate relative to its support bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Offset {
    Lower,
    LowerPlusOne,
    UpperMinusOne,
    Upper,
    Interior,
    /// Simultaneously in two boundary classes (short supports): ignored.
    Ambiguous,
}

fn classify(y: i64, lower: ExtInt, upper: ExtInt) -> Offset {
    let a = lower.finite();
    let b = upper.finite();
    let mut classes = Vec::with_capacity(2);
    if a == Some(y) {
        classes.push(Offset::Lower);
    }
    if a.map(|a| a + 1) == Some(y) {
        classes.push(Offset::LowerPlusOne);
    }
    if b.map(|b| b - 1) == Some(y) {
        classes.push(Offset::UpperMinusOne);
    }
    if b == Some(y) {
        classes.push(Offset::Upper);
    }
    match classes.len() {
        0 => Offset::Interior,
        1 => classes[0],
        _ => Offset::Ambiguous,
    }
}

/// Discrete analogue of the Hyvärinen score, built from central finite
/// differences `∂_k p(y) = (p(y+e_k) - p(y-e_k)) / 2` with the boundary
/// rules at `a_k, a_k+1, b_k-1, b_k`.
///
/// `log_pmf` may be unnormalized; only ratios of its values are used. On
/// supports with `b_k - a_k < 3`, offsets that fall into two boundary classes
/// at once, or whose rule would probe outside the support, contribute zero.
pub fn discrete_hscore<T, F>(y: &[i64], log_pmf: F, support: &DiscreteSupport) -> Result<T>
where
    T: Real,
    F: Fn(&[i64]) -> T,
{
    if !support.contains(y) {
        return Err(Error::OutOfSupport(format!("{y:?} outside discrete support")));
    }
    let mut total = T::zero();
    for k in 0..y.len() {
        let lp_at = |off: i64| -> Result<T> {
            let mut z = y.to_vec();
            z[k] += off;
            if !support.contains_coord(k, z[k]) {
                return Err(Error::OutOfSupport(format!("probe {z:?}")));
            }
            let v = log_pmf(&z);
            if v.is_nan() || v == T::infinity() {
                return Err(Error::Scoring(format!("invalid log-pmf at {z:?}")));
            }
            if v == T::neg_infinity() {
                return Err(Error::Scoring(format!("zero pmf at {z:?} inside support")));
            }
            Ok(v)
        };
        // ∂_k log p at y + c·e_k, as a ratio of neighbours to the centre.
        let dlog = |c: i64| -> Result<T> {
            let centre = lp_at(c)?;
            let up = lp_at(c + 1)?;
            let down = lp_at(c - 1)?;
            Ok(((up - centre).exp() - (down - centre).exp()) / T::lit(2.0))
        };
        let hk = match classify(y[k], support.lower[k], support.upper[k]) {
            Offset::Interior => {
                let g = dlog(0)?;
                (dlog(1)? - dlog(-1)?) + g * g
            }
            Offset::Lower => optional(dlog(1))?,
            Offset::LowerPlusOne => match (dlog(1), dlog(0)) {
                (Ok(a), Ok(g)) => a + g * g,
                (Err(Error::OutOfSupport(_)), _) | (_, Err(Error::OutOfSupport(_))) => T::zero(),
                (Err(e), _) | (_, Err(e)) => return Err(e),
            },
            Offset::UpperMinusOne => match (dlog(-1), dlog(0)) {
                (Ok(a), Ok(g)) => -a + g * g,
                (Err(Error::OutOfSupport(_)), _) | (_, Err(Error::OutOfSupport(_))) => T::zero(),
                (Err(e), _) | (_, Err(e)) => return Err(e),
            },
            Offset::Upper => -optional(dlog(-1))?,
            Offset::Ambiguous => T::zero(),
        };
        total = total + hk;
    }
    Ok(total)
}

fn optional<T: Real>(r: Result<T>) -> Result<T> {
    match r {
        Err(Error::OutOfSupport(_)) => Ok(T::zero()),
        other => other,
    }
}

fn check_variance<T: Real>(sigma2_star: T) -> Result<()> {
    if !(sigma2_star > T::zero()) || !sigma2_star.is_finite() {
        return Err(invalid("variance must be positive and finite"));
    }
    Ok(())
}

/// `D_H(p★, M₂) − D_H(p★, M₁)` for data `N(μ★, σ★²)`, with
/// `M₁ = N(θ, 1)` and `M₂ = N(0, θ)`.
pub fn fisher_divergence_gap_normal<T: Real>(mu_star: T, sigma2_star: T) -> Result<T> {
    check_variance(sigma2_star)?;
    let m2 = mu_star * mu_star;
    let dv = sigma2_star - T::one();
    Ok(m2 / (sigma2_star * (m2 + sigma2_star)) - dv * dv / sigma2_star)
}

/// `KL(p★, M₂) − KL(p★, M₁)` for the same pair of models.
pub fn kl_gap_normal<T: Real>(mu_star: T, sigma2_star: T) -> Result<T> {
    check_variance(sigma2_star)?;
    let half = T::lit(0.5);
    let m2 = mu_star * mu_star;
    Ok(half * ((m2 + sigma2_star) / sigma2_star).ln()
        - half * ((sigma2_star - T::one()) - sigma2_star.ln()))
}

/// Boundaries `(B_H, B_KL)` in `|μ★|` at which each divergence gap changes
/// sign; `B_H` is `+∞` for `σ★² ≥ 2`.
pub fn divergence_boundaries<T: Real>(sigma2_star: T) -> Result<(T, T)> {
    check_variance(sigma2_star)?;
    let two = T::lit(2.0);
    let b_h = if sigma2_star < two {
        (sigma2_star - T::one()).abs() / (two - sigma2_star).sqrt()
    } else {
        T::infinity()
    };
    let b_kl = ((sigma2_star - T::one()).exp() - sigma2_star).max(T::zero()).sqrt();
    Ok((b_h, b_kl))
}
