//! Srinivasan sampling process (SSP) resampling.

use rand::Rng;

use crate::error::{invalid, Result};

/// Offspring counts from normalized `weights` with the SSP scheme.
///
/// Each count is `⌊N w_i⌋` or `⌈N w_i⌉`, counts sum to `N`, and
/// `E[count_i] = N w_i`. Fractional parts are paired off one at a time so
/// that one of the two is settled to 0 or 1 at each step.
pub fn ssp_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    ssp_counts(weights, weights.len(), rng)
}

/// SSP counts for `m` offspring (`m` may differ from the number of weights):
/// each count is `⌊m w_i⌋` or `⌈m w_i⌉` and counts sum to `m`.
pub fn ssp_counts<R: Rng + ?Sized>(weights: &[f64], m: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = weights.len();
    if n == 0 {
        return Err(invalid("cannot resample an empty weight vector"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(invalid("weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(invalid(format!("weights sum to {total}, expected 1")));
    }
    let mf = m as f64;
    let mut counts = vec![0usize; n];
    let mut frac = vec![0.0f64; n];
    for i in 0..n {
        let e = mf * weights[i];
        let f = e.floor();
        counts[i] = f as usize;
        frac[i] = e - f;
    }
    const EPS: f64 = 1e-12;
    let mut open: Option<usize> = None;
    for j in 0..n {
        if frac[j] <= EPS {
            continue;
        }
        let Some(i) = open else {
            open = Some(j);
            continue;
        };
        let (pi, pj) = (frac[i], frac[j]);
        let s = pi + pj;
        if s < 1.0 {
            if rng.random::<f64>() < pi / s {
                frac[i] = s;
                frac[j] = 0.0;
            } else {
                frac[i] = 0.0;
                frac[j] = s;
            }
        } else if rng.random::<f64>() < (1.0 - pj) / (2.0 - s) {
            frac[i] = 1.0;
            frac[j] = s - 1.0;
        } else {
            frac[i] = s - 1.0;
            frac[j] = 1.0;
        }
        for k in [i, j] {
            if frac[k] >= 1.0 - EPS {
                counts[k] += 1;
                frac[k] = 0.0;
            } else if frac[k] <= EPS {
                frac[k] = 0.0;
            }
        }
        open = if frac[i] > 0.0 {
            Some(i)
        } else if frac[j] > 0.0 {
            Some(j)
        } else {
            None
        };
    }
    // the fractional mass is an integer in exact arithmetic; fix rounding
    let assigned: usize = counts.iter().sum();
    if assigned < m {
        let k = open.unwrap_or_else(|| {
            (0..n)
                .max_by(|&a, &b| weights[a].total_cmp(&weights[b]))
                .unwrap_or(0)
        });
        counts[k] += m - assigned;
    } else if assigned > m {
        let k = (0..n).max_by_key(|&a| counts[a]).unwrap_or(0);
        counts[k] -= assigned - m;
    }
    Ok(counts)
}

/// Expands offspring counts into an ancestor index list of length `Σ counts`.
pub fn counts_to_ancestors(counts: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (i, &c) in counts.iter().enumerate() {
        out.extend(std::iter::repeat_n(i, c));
    }
    out
}

/// Ancestor indices of `m` SSP draws from normalized weights.
pub fn ssp_ancestors<R: Rng + ?Sized>(weights: &[f64], m: usize, rng: &mut R) -> Result<Vec<usize>> {
    Ok(counts_to_ancestors(&ssp_counts(weights, m, rng)?))
}

#[cfg(test)]
mod tests {
    use super::{ssp_ancestors, ssp_resample};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_weights_give_unit_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = vec![0.125; 8];
        assert_eq!(ssp_resample(&w, &mut rng).unwrap(), vec![1; 8]);
    }

    #[test]
    fn integer_expectations_are_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(ssp_resample(&[0.5, 0.5, 0.0, 0.0], &mut rng).unwrap(), vec![2, 2, 0, 0]);
    }

    #[test]
    fn unnormalized_input_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(ssp_resample(&[0.5, 0.6], &mut rng).is_err());
        assert!(ssp_resample(&[], &mut rng).is_err());
    }

    #[test]
    fn counts_are_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw: Vec<f64> = (0..7).map(|_| rng.random::<f64>() + 0.05).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|r| r / total).collect();
        let reps = 100_000;
        let mut sum = vec![0.0; 7];
        let mut sumsq = vec![0.0; 7];
        for _ in 0..reps {
            let c = ssp_resample(&w, &mut rng).unwrap();
            for i in 0..7 {
                sum[i] += c[i] as f64;
                sumsq[i] += (c[i] * c[i]) as f64;
            }
        }
        for i in 0..7 {
            let mean = sum[i] / reps as f64;
            let var = sumsq[i] / reps as f64 - mean * mean;
            let se = (var / reps as f64).sqrt().max(1e-12);
            let expect = 7.0 * w[i];
            assert!((mean - expect).abs() < 3.0 * se + 1e-12, "index {i}: {mean} vs {expect}");
        }
    }

    #[test]
    fn ancestors_of_other_size_are_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = [0.1, 0.2, 0.3, 0.4];
        let m = 10;
        let reps = 50_000;
        let mut sum = [0.0; 4];
        for _ in 0..reps {
            let a = ssp_ancestors(&w, m, &mut rng).unwrap();
            assert_eq!(a.len(), m);
            for i in a {
                sum[i] += 1.0;
            }
        }
        for i in 0..4 {
            let mean = sum[i] / reps as f64;
            assert!((mean - m as f64 * w[i]).abs() < 0.02, "{i}: {mean}");
        }
    }

    proptest! {
        #[test]
        fn counts_are_floor_or_ceil_and_sum_to_n(raw in prop::collection::vec(0.0f64..1.0, 1..50), seed in any::<u64>()) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-6);
            let w: Vec<f64> = raw.iter().map(|r| r / total).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = ssp_resample(&w, &mut rng).unwrap();
            let n = w.len();
            prop_assert_eq!(c.iter().sum::<usize>(), n);
            for (ci, wi) in c.iter().zip(&w) {
                let e = n as f64 * wi;
                let lo = (e - 1e-9).floor() as usize;
                let hi = (e + 1e-9).ceil() as usize;
                prop_assert!(*ci >= lo && *ci <= hi, "count {} expected in [{}, {}]", ci, lo, hi);
            }
        }
    }
}
