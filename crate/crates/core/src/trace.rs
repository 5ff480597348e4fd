//! Per-observation record of log-evidence and H-score estimates.

use serde::{Deserialize, Serialize};

use crate::num::Real;
use crate::scoring::ScoreIncrement;

/// Sampler diagnostics attached to one assimilation step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepDiagnostics<T> {
    /// θ-level ESS before the first reweighting of the step.
    pub ess_before: Option<T>,
    /// Number of tempering stages (1 when the full likelihood was absorbed at once).
    pub n_temper_steps: usize,
    /// Pooled acceptance rate of the move steps, if any move ran.
    pub acceptance_rate: Option<T>,
    /// Number of x-particles per θ-particle (SMC² only).
    pub n_x: Option<usize>,
    /// θ-particles dropped from a kernel-density increment.
    pub kde_excluded: usize,
    /// Increment flagged as unreliable (too many exclusions).
    pub unreliable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow<T> {
    /// 1-based observation index.
    pub t: usize,
    pub log_evidence_increment: T,
    pub log_evidence_cum: T,
    /// `None` before the first index with a proper posterior.
    pub h_increment: Option<ScoreIncrement<T>>,
    pub h_cum: T,
    pub diagnostics: StepDiagnostics<T>,
}

/// Prequential trace: cumulative columns are prefix sums of the increments,
/// H accumulation starting at `first_scored`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrequentialTrace<T = f64> {
    rows: Vec<TraceRow<T>>,
    first_scored: usize,
}

impl<T: Real> PrequentialTrace<T> {
    /// `first_proper_index` is the first `t` whose posterior is proper;
    /// increments are summed from `max(first_proper_index, 1)`.
    pub fn new(first_proper_index: usize) -> Self {
        Self {
            rows: Vec::new(),
            first_scored: first_proper_index.max(1),
        }
    }

    pub fn first_scored(&self) -> usize {
        self.first_scored
    }

    /// Appends the next row. `h_increment` is dropped for `t < first_scored`.
    pub fn push(
        &mut self,
        log_evidence_increment: T,
        h_increment: Option<ScoreIncrement<T>>,
        diagnostics: StepDiagnostics<T>,
    ) {
        let t = self.rows.len() + 1;
        let (prev_ev, prev_h) = self
            .rows
            .last()
            .map(|r| (r.log_evidence_cum, r.h_cum))
            .unwrap_or((T::zero(), T::zero()));
        let h_increment = if t >= self.first_scored { h_increment } else { None };
        let h_cum = prev_h + h_increment.as_ref().map(|h| h.value).unwrap_or(T::zero());
        self.rows.push(TraceRow {
            t,
            log_evidence_increment,
            log_evidence_cum: prev_ev + log_evidence_increment,
            h_increment,
            h_cum,
            diagnostics,
        });
    }

    pub fn rows(&self) -> &[TraceRow<T>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn log_evidence_cum(&self) -> Vec<T> {
        self.rows.iter().map(|r| r.log_evidence_cum).collect()
    }

    pub fn h_cum(&self) -> Vec<T> {
        self.rows.iter().map(|r| r.h_cum).collect()
    }

    pub fn final_log_evidence(&self) -> T {
        self.rows.last().map(|r| r.log_evidence_cum).unwrap_or(T::zero())
    }

    pub fn final_h(&self) -> T {
        self.rows.last().map(|r| r.h_cum).unwrap_or(T::zero())
    }

    /// Number of rows flagged unreliable.
    pub fn unreliable_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.diagnostics.unreliable).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accumulation_starts_at_first_proper_index() {
        let mut tr = PrequentialTrace::<f64>::new(2);
        for v in [1.0, 2.0, 3.0] {
            tr.push(-v, Some(ScoreIncrement::scalar(v)), StepDiagnostics::default());
        }
        assert_eq!(tr.h_cum(), vec![0.0, 2.0, 5.0]);
        assert!(tr.rows()[0].h_increment.is_none());
        assert_eq!(tr.log_evidence_cum(), vec![-1.0, -3.0, -6.0]);
    }

    #[test]
    fn proper_prior_scores_from_the_first_row() {
        let mut tr = PrequentialTrace::<f64>::new(0);
        tr.push(0.0, Some(ScoreIncrement::scalar(4.0)), StepDiagnostics::default());
        assert_eq!(tr.final_h(), 4.0);
    }

    proptest! {
        #[test]
        fn cumulative_columns_are_prefix_sums(incs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40)) {
            let mut tr = PrequentialTrace::<f64>::new(0);
            for &(e, h) in &incs {
                tr.push(e, Some(ScoreIncrement::scalar(h)), StepDiagnostics::default());
            }
            let (mut se, mut sh) = (0.0, 0.0);
            for (row, &(e, h)) in tr.rows().iter().zip(&incs) {
                se += e;
                sh += h;
                prop_assert_eq!(row.log_evidence_cum, se);
                prop_assert_eq!(row.h_cum, sh);
            }
        }
    }
}
