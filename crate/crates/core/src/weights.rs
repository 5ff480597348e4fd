//! Log-weight arithmetic and the effective sample size.

use crate::error::{Error, Result};
use crate::num::Real;

/// `log Σ exp(x_i)`; `-inf` for an empty slice or all `-inf` entries.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let s: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Normalized linear weights and `log Σ exp(log_weights)`.
pub fn normalize<T: Real>(log_weights: &[T]) -> Result<(Vec<T>, T)> {
    let lse = log_sum_exp(log_weights);
    if lse == T::neg_infinity() || lse.is_nan() {
        return Err(Error::Degenerate(
            "no particle carries a finite log-weight".into(),
        ));
    }
    if lse == T::infinity() {
        return Err(Error::Degenerate("log-weight overflow to +inf".into()));
    }
    Ok((log_weights.iter().map(|&w| (w - lse).exp()).collect(), lse))
}

/// Effective sample size `(Σw)² / Σw²` of a set of log-weights.
///
/// Invariant to adding a constant to every log-weight.
pub fn ess<T: Real>(log_weights: &[T]) -> Result<T> {
    let max = log_weights.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return Err(Error::Degenerate(
            "no particle carries a finite log-weight".into(),
        ));
    }
    let (mut s, mut sq) = (T::zero(), T::zero());
    for &x in log_weights {
        let e = (x - max).exp();
        s = s + e;
        sq = sq + e * e;
    }
    Ok(s * s / sq)
}

/// ESS of `log_weights + delta * increments`, with `0 · (-inf) = 0`.
pub fn ess_after<T: Real>(log_weights: &[T], increments: &[T], delta: T) -> Result<T> {
    let shifted: Vec<T> = log_weights
        .iter()
        .zip(increments)
        .map(|(&w, &l)| w + scaled(delta, l))
        .collect();
    ess(&shifted)
}

#[inline]
pub(crate) fn scaled<T: Real>(delta: T, l: T) -> T {
    if delta == T::zero() {
        T::zero()
    } else {
        delta * l
    }
}

/// Weighted mean of `values` with normalized weights.
pub fn weighted_mean<T: Real>(weights: &[T], values: &[T]) -> T {
    weights.iter().zip(values).map(|(&w, &v)| w * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn ess_examples() {
        assert_relative_eq!(ess(&vec![0.0f64; 64]).unwrap(), 64.0, epsilon = 1e-12);
        let one_hot = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY];
        assert_relative_eq!(ess(&one_hot).unwrap(), 1.0, epsilon = 1e-12);
        let lw = [1f64.ln(), 1f64.ln(), 2f64.ln()];
        assert_relative_eq!(ess(&lw).unwrap(), 16.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_weights_are_rejected() {
        assert!(matches!(
            ess(&[f64::NEG_INFINITY; 3]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn works_in_single_precision() {
        assert!((ess(&[0.0f32; 10]).unwrap() - 10.0).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn ess_shift_invariance(lw in prop::collection::vec(-30.0f64..30.0, 2..200), c in -500.0f64..500.0) {
            let shifted: Vec<f64> = lw.iter().map(|w| w + c).collect();
            let a = ess(&lw).unwrap();
            let b = ess(&shifted).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a);
            let dyadic: Vec<f64> = lw.iter().map(|w| (w * 64.0).round() / 64.0).collect();
            let dyadic_shifted: Vec<f64> = dyadic.iter().map(|w| w + c.round()).collect();
            prop_assert_eq!(ess(&dyadic).unwrap(), ess(&dyadic_shifted).unwrap());
            prop_assert!(a >= 1.0 - 1e-12 && a <= lw.len() as f64 + 1e-9);
        }
    }
}
