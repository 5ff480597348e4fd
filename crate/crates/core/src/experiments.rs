//! Study harness: Normal cases, divergence phase plane, Lévy SV and
//! population-dynamics comparisons.
//!
//! Every study returns a [`StudyResult`] holding one prequential trace per
//! (replication, model), plus a [`StudySummary`] of final values, tail
//! slopes and pass/fail checks. Replications run in parallel on streams
//! derived from the root seed and are merged in replication order.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::{
    simulate_iid, simulate_ssm, Dataset, IidModel, KangarooModel, KangarooVariant, LevySvModel, LevySvVariant,
    NormalLocation, NormalScale, SsmModel,
};
use crate::oracle::NormalHyper;
use crate::rng::{derive_seed, stream, tag};
use crate::scoring::{divergence_boundaries, fisher_divergence_gap_normal, kl_gap_normal};
use crate::smc::{run_smc_into, SmcConfig};
use crate::smc2::{run_smc2_into, HscoreMode, Smc2Config};
use crate::trace::PrequentialTrace;

/// `(μ★, σ★²)` of the four Normal cases.
pub const NORMAL_CASES: [(f64, f64); 4] = [(1.0, 1.0), (0.0, 5.0), (4.0, 3.0), (0.0, 1.0)];

/// Lévy SV generating parameters `(λ, ξ, ω², μ, β)`.
pub const SV_TRUE_THETA: [f64; 5] = [0.01, 0.5, 0.0625, 0.0, 0.0];

/// Run size of the SMC² studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Full-size runs.
    Paper,
    /// Reduced sizes for routine runs.
    Desk,
}

/// One sampler run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRun {
    pub replication: usize,
    pub model: String,
    pub trace: PrequentialTrace<f64>,
}

/// A named pass/fail check with its target band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub target: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    pub fn within(name: impl Into<String>, value: f64, target: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            target,
            tolerance,
            pass: (value - target).abs() <= tolerance,
        }
    }

    /// Passes when `value > 0` (target and tolerance are informational).
    pub fn positive(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            value,
            target: 0.0,
            tolerance: 0.0,
            pass: value > 0.0,
        }
    }
}

/// Per-model final values across replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub final_h: Vec<f64>,
    pub final_log_evidence: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StudySummary {
    pub study: String,
    pub models: Vec<ModelSummary>,
    /// Per-replication tail slopes, keyed by a short label.
    pub slopes: Vec<(String, Vec<f64>)>,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub study: String,
    pub runs: Vec<ModelRun>,
    pub summary: StudySummary,
}

impl StudyResult {
    pub fn new(study: impl Into<String>, runs: Vec<ModelRun>) -> Self {
        let study = study.into();
        let mut models: Vec<ModelSummary> = Vec::new();
        for r in &runs {
            let entry = match models.iter_mut().position(|m| m.model == r.model) {
                Some(i) => &mut models[i],
                None => {
                    models.push(ModelSummary {
                        model: r.model.clone(),
                        final_h: Vec::new(),
                        final_log_evidence: Vec::new(),
                    });
                    models.last_mut().expect("just pushed")
                }
            };
            entry.final_h.push(r.trace.final_h());
            entry.final_log_evidence.push(r.trace.final_log_evidence());
        }
        Self {
            summary: StudySummary {
                study: study.clone(),
                models,
                ..Default::default()
            },
            study,
            runs,
        }
    }

    pub fn replications(&self) -> usize {
        self.runs.iter().map(|r| r.replication + 1).max().unwrap_or(0)
    }

    pub fn trace(&self, replication: usize, model: &str) -> Option<&PrequentialTrace<f64>> {
        self.runs
            .iter()
            .find(|r| r.replication == replication && r.model == model)
            .map(|r| &r.trace)
    }

    /// `H_t(second) - H_t(first)` for one replication.
    pub fn h_factor(&self, replication: usize, first: &str, second: &str) -> Result<Vec<f64>> {
        let (a, b) = self.pair(replication, first, second)?;
        Ok(a.h_cum().iter().zip(b.h_cum()).map(|(x, y)| y - x).collect())
    }

    /// `log p(y_{1:t} | first) - log p(y_{1:t} | second)` for one replication.
    pub fn log_bayes_factor(&self, replication: usize, first: &str, second: &str) -> Result<Vec<f64>> {
        let (a, b) = self.pair(replication, first, second)?;
        Ok(a.log_evidence_cum()
            .iter()
            .zip(b.log_evidence_cum())
            .map(|(x, y)| x - y)
            .collect())
    }

    fn pair(&self, replication: usize, first: &str, second: &str) -> Result<(&PrequentialTrace<f64>, &PrequentialTrace<f64>)> {
        let get = |m: &str| {
            self.trace(replication, m)
                .ok_or_else(|| invalid(format!("no run of {m} in replication {replication}")))
        };
        Ok((get(first)?, get(second)?))
    }

    pub fn model_summary(&self, model: &str) -> Option<&ModelSummary> {
        self.summary.models.iter().find(|m| m.model == model)
    }

    /// Long-format CSV: `study,replication,model,t,log_evidence_cum,h_cum`,
    /// preceded by `# `-prefixed metadata lines.
    pub fn write_csv<W: Write>(&self, mut out: W, metadata: &[String]) -> Result<()> {
        for m in metadata {
            writeln!(out, "# {m}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["study", "replication", "model", "t", "log_evidence_cum", "h_cum"])?;
        for r in &self.runs {
            for row in r.trace.rows() {
                w.write_record([
                    self.study.clone(),
                    r.replication.to_string(),
                    r.model.clone(),
                    row.t.to_string(),
                    format!("{:?}", row.log_evidence_cum),
                    format!("{:?}", row.h_cum),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean and standard error of the mean.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Standard error of the difference of two independent sample means.
pub fn pooled_se(a: &[f64], b: &[f64]) -> f64 {
    let (_, sa) = mean_and_se(a);
    let (_, sb) = mean_and_se(b);
    (sa * sa + sb * sb).sqrt()
}

/// Least-squares slope of `values[i]` against `t = i + 1` over the index
/// range `window`.
pub fn slope_estimate(values: &[f64], window: std::ops::Range<usize>) -> Result<f64> {
    if window.end > values.len() || window.len() < 2 {
        return Err(invalid(format!(
            "slope window {window:?} needs at least two points inside a trace of length {}",
            values.len()
        )));
    }
    let n = window.len() as f64;
    let ts: Vec<f64> = window.clone().map(|i| (i + 1) as f64).collect();
    let ys = &values[window];
    let tm = ts.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, y) in ts.iter().zip(ys) {
        sxy += (t - tm) * (y - ym);
        sxx += (t - tm) * (t - tm);
    }
    Ok(sxy / sxx)
}

/// Slope over the last half of the trace.
pub fn tail_slope(values: &[f64]) -> Result<f64> {
    slope_estimate(values, values.len() / 2..values.len())
}

fn replication_seed(seed: u64, rep: usize) -> u64 {
    derive_seed(seed, &[tag::REPLICATION, rep as u64])
}

/// A study that stopped early. `partial` holds every run as far as it got,
/// including the failed ones.
#[derive(Debug, thiserror::Error)]
#[error("{source}")]
pub struct StudyError {
    pub source: Error,
    pub partial: Box<StudyResult>,
}

impl StudyError {
    fn bare(study: &str, source: Error) -> Self {
        Self {
            source,
            partial: Box::new(StudyResult::new(study, Vec::new())),
        }
    }
}

impl From<StudyError> for Error {
    fn from(e: StudyError) -> Self {
        e.source
    }
}

pub type StudyOutcome<T> = std::result::Result<T, StudyError>;

/// First error in replication order, with all runs attached.
fn settle(model: &str, outcomes: Vec<(ModelRun, Option<Error>)>) -> StudyOutcome<Vec<ModelRun>> {
    let mut runs = Vec::with_capacity(outcomes.len());
    let mut first = None;
    for (run, err) in outcomes {
        if first.is_none() {
            first = err;
        }
        runs.push(run);
    }
    match first {
        None => Ok(runs),
        Some(source) => Err(StudyError {
            source,
            partial: Box::new(StudyResult::new(model, runs)),
        }),
    }
}

/// Gathers runs of several models into one study, carrying completed runs
/// into the partial result when a later model fails.
struct Collector {
    study: String,
    runs: Vec<ModelRun>,
}

impl Collector {
    fn new(study: impl Into<String>) -> Self {
        Self {
            study: study.into(),
            runs: Vec::new(),
        }
    }

    fn add(&mut self, outcome: StudyOutcome<Vec<ModelRun>>) -> StudyOutcome<()> {
        match outcome {
            Ok(runs) => {
                self.runs.extend(runs);
                Ok(())
            }
            Err(e) => {
                let mut runs = std::mem::take(&mut self.runs);
                runs.extend(e.partial.runs);
                runs.sort_by_key(|r| r.replication);
                Err(StudyError {
                    source: e.source,
                    partial: Box::new(StudyResult::new(self.study.clone(), runs)),
                })
            }
        }
    }

    /// Fails with the partial study when `r` is an error.
    fn check<T>(&self, r: Result<T>) -> StudyOutcome<T> {
        r.map_err(|source| StudyError::bare(&self.study, source))
    }

    fn finish(mut self) -> StudyResult {
        self.runs.sort_by_key(|r| r.replication);
        StudyResult::new(self.study, self.runs)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalStudyConfig {
    pub t_len: usize,
    pub replications: usize,
    pub n_theta: usize,
    /// Random data order per replication.
    pub permute: bool,
    pub hyper: NormalHyper,
    pub smc: SmcConfig,
    pub seed: u64,
}

impl Default for NormalStudyConfig {
    fn default() -> Self {
        Self {
            t_len: 1000,
            replications: 5,
            n_theta: 1024,
            permute: true,
            hyper: NormalHyper::default(),
            smc: SmcConfig::default(),
            seed: 1,
        }
    }
}

/// Draws of `N(μ★, σ★²)` for a Normal case (1-based).
pub fn normal_case_data(case: usize, t_len: usize, seed: u64) -> Result<Dataset> {
    let (mu, s2) = *NORMAL_CASES
        .get(case.wrapping_sub(1))
        .ok_or_else(|| invalid(format!("Normal case must be 1..=4, got {case}")))?;
    let unit = NormalLocation::new(1.0)?;
    let mut ds = simulate_iid(&unit, &[0.0], t_len, &mut stream(seed, &[tag::DATA, case as u64]))?;
    ds.values.iter_mut().for_each(|v| *v = mu + s2.sqrt() * *v);
    Ok(ds)
}

/// Runs `model` on `data` for every replication, each with its own
/// seed and (optionally) its own random data order.
pub fn replicate_iid(
    model: &dyn IidModel,
    data: &Dataset,
    base: &SmcConfig,
    replications: usize,
    permute: bool,
    seed: u64,
) -> StudyOutcome<Vec<ModelRun>> {
    let outcomes: Vec<(ModelRun, Option<Error>)> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let rs = replication_seed(seed, rep);
            let cfg = SmcConfig {
                seed: rs,
                ..base.clone()
            };
            let perm = permute.then(|| {
                let mut p: Vec<usize> = (0..data.len()).collect();
                p.shuffle(&mut stream(rs, &[tag::PERMUTATION]));
                p
            });
            let mut trace = PrequentialTrace::new(model.first_proper_index());
            let err = run_smc_into(model, data, &cfg, perm.as_deref(), &mut trace).err();
            let run = ModelRun {
                replication: rep,
                model: model.name().to_string(),
                trace,
            };
            (run, err)
        })
        .collect();
    settle(model.name(), outcomes)
}

/// Normal case study: `M₁ = N(θ, 1)` against `M₂ = N(0, θ)` on draws from
/// case `case`, with tail-slope checks against the limiting divergence gaps.
pub fn run_normal_cases(case: usize, config: &NormalStudyConfig) -> StudyOutcome<StudyResult> {
    let data = normal_case_data(case, config.t_len, config.seed).map_err(|e| StudyError::bare("normal", e))?;
    run_normal_study_on(case, &data, config)
}

/// Same as [`run_normal_cases`] on given data.
pub fn run_normal_study_on(case: usize, data: &Dataset, config: &NormalStudyConfig) -> StudyOutcome<StudyResult> {
    let mut c = Collector::new(format!("normal-case-{case}"));
    let (mu, s2) = c.check(
        NORMAL_CASES
            .get(case.wrapping_sub(1))
            .copied()
            .ok_or_else(|| invalid(format!("Normal case must be 1..=4, got {case}"))),
    )?;
    let m1 = c.check(NormalLocation::new(config.hyper.sigma0_sq))?;
    let m2 = c.check(NormalScale::new(config.hyper.nu0, config.hyper.s0_sq))?;
    let smc = SmcConfig {
        n_theta: config.n_theta,
        ..config.smc.clone()
    };
    // same permutation stream for both models within a replication
    c.add(replicate_iid(&m1, data, &smc, config.replications, config.permute, config.seed))?;
    c.add(replicate_iid(&m2, data, &smc, config.replications, config.permute, config.seed))?;
    summarized(c.finish(), |result| {
        let (a, b) = (m1.name().to_string(), m2.name().to_string());
        let mut h_slopes = Vec::new();
        let mut bf_slopes = Vec::new();
        for rep in 0..config.replications {
            h_slopes.push(tail_slope(&result.h_factor(rep, &a, &b)?)?);
            bf_slopes.push(tail_slope(&result.log_bayes_factor(rep, &a, &b)?)?);
        }
        let h_target = fisher_divergence_gap_normal(mu, s2)?;
        let bf_target = kl_gap_normal(mu, s2)?;
        let (hm, _) = mean_and_se(&h_slopes);
        let (bm, _) = mean_and_se(&bf_slopes);
        result.summary.checks = match case {
            1 => vec![Check::within("h-factor slope", hm, 0.5, 0.1)],
            2 => vec![Check::within("h-factor slope", hm, -3.2, 0.3)],
            3 => {
                let opposite = h_slopes.iter().zip(&bf_slopes).all(|(h, b)| h * b < 0.0);
                vec![
                    Check::within("h-factor slope", hm, -1.05, 0.25),
                    Check::within("log-bf slope", bm, 0.47, 0.15),
                    Check {
                        name: "opposite signs in every replication".into(),
                        value: if opposite { 1.0 } else { 0.0 },
                        target: 1.0,
                        tolerance: 0.0,
                        pass: opposite,
                    },
                ]
            }
            _ => vec![
                Check::within("h-factor slope", hm, 0.0, 0.1),
                Check::within("log-bf slope", bm, 0.0, 0.1),
            ],
        };
        result.summary.slopes = vec![
            ("h-factor".into(), h_slopes),
            ("log-bf".into(), bf_slopes),
            ("limiting h-factor".into(), vec![h_target]),
            ("limiting log-bf".into(), vec![bf_target]),
        ];
        Ok(())
    })
}

/// Applies `f` to a finished study; on failure the study becomes the partial
/// result.
fn summarized(mut result: StudyResult, f: impl FnOnce(&mut StudyResult) -> Result<()>) -> StudyOutcome<StudyResult> {
    match f(&mut result) {
        Ok(()) => Ok(result),
        Err(source) => Err(StudyError {
            source,
            partial: Box::new(result),
        }),
    }
}

/// Grid of `(μ★, σ★²)` points for the phase plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseGrid {
    pub mu_max: f64,
    pub mu_points: usize,
    pub sigma2_min: f64,
    pub sigma2_max: f64,
    pub sigma2_points: usize,
}

impl Default for PhaseGrid {
    fn default() -> Self {
        Self {
            mu_max: 5.0,
            mu_points: 101,
            sigma2_min: 0.05,
            sigma2_max: 6.0,
            sigma2_points: 120,
        }
    }
}

/// One grid point: the two divergence gaps and whether they disagree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub mu: f64,
    pub sigma2: f64,
    pub fisher_gap: f64,
    pub kl_gap: f64,
    pub disagree: bool,
}

/// Evaluates `sign(D_H gap)` and `sign(KL gap)` on a grid of `|μ★| ≥ 0`
/// and `σ★² > 0`.
pub fn run_phase_plane(grid: &PhaseGrid) -> Result<Vec<PhaseCell>> {
    if grid.mu_points < 2 || grid.sigma2_points < 2 || !(grid.sigma2_min > 0.0) || grid.sigma2_max <= grid.sigma2_min {
        return Err(invalid("phase grid needs two points per axis and 0 < sigma2_min < sigma2_max"));
    }
    let mut out = Vec::with_capacity(grid.mu_points * grid.sigma2_points);
    for i in 0..grid.sigma2_points {
        let s2 = grid.sigma2_min + (grid.sigma2_max - grid.sigma2_min) * i as f64 / (grid.sigma2_points - 1) as f64;
        for j in 0..grid.mu_points {
            let mu = grid.mu_max * j as f64 / (grid.mu_points - 1) as f64;
            let fisher_gap = fisher_divergence_gap_normal(mu, s2)?;
            let kl_gap = kl_gap_normal(mu, s2)?;
            out.push(PhaseCell {
                mu,
                sigma2: s2,
                fisher_gap,
                kl_gap,
                disagree: fisher_gap * kl_gap < 0.0,
            });
        }
    }
    Ok(out)
}

/// `(B_H, B_KL)` boundary curves at the grid's variances.
pub fn phase_boundaries(grid: &PhaseGrid) -> Result<Vec<(f64, f64, f64)>> {
    (0..grid.sigma2_points)
        .map(|i| {
            let s2 = grid.sigma2_min + (grid.sigma2_max - grid.sigma2_min) * i as f64 / (grid.sigma2_points.max(2) - 1) as f64;
            let (bh, bk) = divergence_boundaries(s2)?;
            Ok((s2, bh, bk))
        })
        .collect()
}

/// Runs an SSM on `data` for every replication.
pub fn replicate_ssm(
    model: &dyn SsmModel,
    data: &Dataset,
    base: &Smc2Config,
    replications: usize,
    seed: u64,
) -> StudyOutcome<Vec<ModelRun>> {
    let outcomes: Vec<(ModelRun, Option<Error>)> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let cfg = Smc2Config {
                seed: replication_seed(seed, rep),
                ..base.clone()
            };
            let mut trace = PrequentialTrace::new(0);
            let err = run_smc2_into(model, data, &cfg, &mut trace).err();
            let run = ModelRun {
                replication: rep,
                model: model.name().to_string(),
                trace,
            };
            (run, err)
        })
        .collect();
    settle(model.name(), outcomes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvStudyConfig {
    pub t_len: usize,
    pub replications: usize,
    pub smc2: Smc2Config,
    pub seed: u64,
}

impl SvStudyConfig {
    pub fn at_scale(scale: Scale) -> Self {
        let smc2 = Smc2Config {
            hscore_mode: HscoreMode::Kde,
            kde_draws: 1024,
            kde_bandwidth: 0.1,
            ..Smc2Config::default()
        };
        match scale {
            Scale::Paper => Self {
                t_len: 1000,
                replications: 15,
                smc2: Smc2Config {
                    n_theta: 1024,
                    n_x_init: 128,
                    ..smc2
                },
                seed: 1,
            },
            Scale::Desk => Self {
                t_len: 200,
                replications: 3,
                smc2: Smc2Config {
                    n_theta: 256,
                    n_x_init: 64,
                    n_x_max: 256,
                    ..smc2
                },
                seed: 1,
            },
        }
    }
}

impl Default for SvStudyConfig {
    fn default() -> Self {
        Self::at_scale(Scale::Desk)
    }
}

/// Log-returns simulated from the one-factor model at [`SV_TRUE_THETA`].
pub fn sv_data(t_len: usize, seed: u64) -> Result<Dataset> {
    let m = LevySvModel::new(LevySvVariant::OneFactor);
    let times: Vec<f64> = (1..=t_len).map(|t| t as f64).collect();
    simulate_ssm(&m, &SV_TRUE_THETA, &times, &mut stream(seed, &[tag::DATA]))
}

/// One-factor (M₁) against two-factor (M₂) Lévy-driven SV on data from M₁.
pub fn run_sv_study(config: &SvStudyConfig) -> StudyOutcome<StudyResult> {
    let data = sv_data(config.t_len, config.seed).map_err(|e| StudyError::bare("levy-sv", e))?;
    run_sv_study_on(&data, config)
}

/// Same as [`run_sv_study`] on given data.
pub fn run_sv_study_on(data: &Dataset, config: &SvStudyConfig) -> StudyOutcome<StudyResult> {
    let m1 = LevySvModel::new(LevySvVariant::OneFactor);
    let m2 = LevySvModel::new(LevySvVariant::TwoFactor);
    let mut c = Collector::new("levy-sv");
    c.add(replicate_ssm(&m1, data, &config.smc2, config.replications, config.seed))?;
    c.add(replicate_ssm(&m2, data, &config.smc2, config.replications, config.seed))?;
    summarized(c.finish(), |result| {
        let (a, b) = (m1.name().to_string(), m2.name().to_string());
        let mut hf = Vec::new();
        let mut bf = Vec::new();
        for rep in 0..config.replications {
            hf.push(*result.h_factor(rep, &a, &b)?.last().unwrap_or(&f64::NAN));
            bf.push(*result.log_bayes_factor(rep, &a, &b)?.last().unwrap_or(&f64::NAN));
        }
        let (hm, _) = mean_and_se(&hf);
        let (bm, _) = mean_and_se(&bf);
        result.summary.checks = vec![
            Check::positive("mean final h-factor (M1 selected)", hm),
            Check::positive("mean final log-bf (M1 selected)", bm),
        ];
        result.summary.slopes = vec![("final h-factor".into(), hf), ("final log-bf".into(), bf)];
        Ok(())
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KangarooStudyConfig {
    pub replications: usize,
    pub delta_t: f64,
    /// Bound of the widened growth-rate prior for the re-run of M₂.
    pub wide_growth_bound: f64,
    pub smc2: Smc2Config,
    pub seed: u64,
}

impl KangarooStudyConfig {
    pub fn at_scale(scale: Scale) -> Self {
        let (n_theta, delta_t) = match scale {
            Scale::Paper => (16384, 0.001),
            Scale::Desk => (2048, 0.01),
        };
        Self {
            replications: 5,
            delta_t,
            wide_growth_bound: 100.0,
            smc2: Smc2Config {
                n_theta,
                n_x_init: 32,
                n_x_max: 256,
                ..Smc2Config::default()
            },
            seed: 1,
        }
    }
}

impl Default for KangarooStudyConfig {
    fn default() -> Self {
        Self::at_scale(Scale::Desk)
    }
}

/// Logistic (M₁), exponential (M₂) and random-walk (M₃) population models,
/// plus M₂ under a widened growth-rate prior, scored with the discrete
/// H-score on bivariate counts.
pub fn run_kangaroo_study(data: &Dataset, config: &KangarooStudyConfig) -> StudyOutcome<StudyResult> {
    let mut c = Collector::new("kangaroo");
    if data.dim_y != 2 {
        return Err(StudyError::bare(
            "kangaroo",
            Error::Dataset("population counts must have two columns".into()),
        ));
    }
    let models: Vec<KangarooModel> = c.check((|| {
        Ok(vec![
            KangarooModel::new(KangarooVariant::Logistic, config.delta_t)?,
            KangarooModel::new(KangarooVariant::Exponential, config.delta_t)?,
            KangarooModel::new(KangarooVariant::RandomWalk, config.delta_t)?,
            KangarooModel::new(KangarooVariant::Exponential, config.delta_t)?
                .with_growth_bound(config.wide_growth_bound)?,
        ])
    })())?;
    for m in &models {
        c.add(replicate_ssm(m, data, &config.smc2, config.replications, config.seed))?;
    }
    summarized(c.finish(), |result| {
        let names: Vec<String> = models.iter().map(|m| m.name().to_string()).collect();
        let fh = |m: &str| result.model_summary(m).map(|s| s.final_h.clone()).unwrap_or_default();
        let fe = |m: &str| result.model_summary(m).map(|s| s.final_log_evidence.clone()).unwrap_or_default();
        let means: Vec<f64> = names[..3].iter().map(|m| mean_and_se(&fh(m)).0).collect();
        let m3_best = means[2] < means[0] && means[2] < means[1];
        let (e2, _) = mean_and_se(&fe(&names[1]));
        let (e2w, _) = mean_and_se(&fe(&names[3]));
        let (h2, _) = mean_and_se(&fh(&names[1]));
        let (h2w, _) = mean_and_se(&fh(&names[3]));
        let h_se = pooled_se(&fh(&names[1]), &fh(&names[3]));
        let widen = -(config.wide_growth_bound / KangarooModel::DEFAULT_GROWTH_BOUND).ln();
        result.summary.checks = vec![
            Check {
                name: "M3 has the lowest mean H-score".into(),
                value: means[2],
                target: means[0].min(means[1]),
                tolerance: 0.0,
                pass: m3_best,
            },
            Check::within("log-evidence shift of M2 under the wide prior", e2w - e2, widen, 0.25 * widen.abs()),
            Check::within("H-score shift of M2 under the wide prior", h2w - h2, 0.0, 3.0 * h_se),
        ];
        Ok(())
    })
}
