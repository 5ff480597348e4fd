//! Adaptive-tempering SMC sampler over parameters for i.i.d. models.
//!
//! Each observation is absorbed through a ladder of tempered targets
//! `p(θ | y_{1:t-1}) p(y_t | θ)^γ`, with γ chosen by bisection to keep the
//! ESS at a fixed fraction of the cloud size. Below the threshold the cloud
//! is resampled (SSP) and moved by independent Metropolis–Hastings with a
//! Gaussian mixture proposal fitted to the weighted particles.

use std::sync::Arc;

use log::{debug, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mixture::{fit_mixture_proposal, Proposal};
use crate::models::{Dataset, IidModel};
use crate::resample::ssp_ancestors;
use crate::rng::{stream, tag};
use crate::scoring::{hscore_increment_from_derivs, ScoreIncrement};
use crate::trace::{PrequentialTrace, StepDiagnostics};
use crate::weights::{ess_after, log_sum_exp, normalize, scaled};

pub use crate::weights::ess;

/// Bisection tolerance on the tempering exponent.
pub const TEMPER_TOLERANCE: f64 = 1e-6;
/// Exponent step taken when no step keeps the ESS above target.
pub const MIN_TEMPER_STEP: f64 = 1e-4;
const LONG_LADDER: usize = 200;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmcConfig {
    pub n_theta: usize,
    /// Resample/move when the ESS falls below this fraction of `n_theta`.
    pub ess_threshold_ratio: f64,
    pub mh_steps_per_temper: usize,
    pub mixture_components: usize,
    pub seed: u64,
    /// Initial distribution of the cloud; the prior when `None`. Required
    /// for improper priors.
    #[serde(skip)]
    pub init_proposal: Option<Arc<dyn Proposal>>,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            n_theta: 1024,
            ess_threshold_ratio: 0.5,
            mh_steps_per_temper: 3,
            mixture_components: 5,
            seed: 0,
            init_proposal: None,
        }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_theta < 2 {
            return Err(invalid("n_theta must be at least 2"));
        }
        if !(self.ess_threshold_ratio > 0.0 && self.ess_threshold_ratio < 1.0) {
            return Err(invalid("ess_threshold_ratio must lie in (0, 1)"));
        }
        if self.mixture_components == 0 {
            return Err(invalid("mixture_components must be positive"));
        }
        Ok(())
    }
}

/// Exponents `0 = γ_0 < γ_1 < ... < γ_J = 1` used for one observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperingLadder {
    pub gammas: Vec<f64>,
}

impl TemperingLadder {
    pub fn n_steps(&self) -> usize {
        self.gammas.len().saturating_sub(1)
    }
}

/// Cached per-particle log-densities: prior, likelihood of the already
/// assimilated observations, likelihood of the current one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleEval {
    pub log_prior: f64,
    pub loglik_past: f64,
    pub loglik_current: f64,
}

impl ParticleEval {
    /// `log p(θ) + log p(y_{1:t-1} | θ) + γ log p(y_t | θ)`.
    pub fn log_target(&self, gamma: f64) -> f64 {
        let base = self.log_prior + self.loglik_past;
        if base == f64::NEG_INFINITY {
            return base;
        }
        base + scaled(gamma, self.loglik_current)
    }
}

/// Weighted parameter particles, row-major `n × dim`.
#[derive(Debug, Clone)]
pub struct ThetaCloud {
    dim: usize,
    particles: Vec<f64>,
    log_weights: Vec<f64>,
    evals: Vec<ParticleEval>,
    step: usize,
}

impl ThetaCloud {
    /// Cloud with the given log-weights; caches start at the prior only.
    pub fn new(model: &dyn IidModel, particles: Vec<f64>, log_weights: Vec<f64>) -> Result<Self> {
        let dim = model.dim_theta();
        if particles.is_empty() || particles.len() != log_weights.len() * dim {
            return Err(invalid("particle matrix does not match the log-weights"));
        }
        if log_weights.iter().any(|w| w.is_nan()) {
            return Err(invalid("NaN log-weight"));
        }
        let evals = particles
            .chunks(dim)
            .map(|th| ParticleEval {
                log_prior: model.prior_log_density(th),
                loglik_past: 0.0,
                loglik_current: 0.0,
            })
            .collect();
        Ok(Self {
            dim,
            particles,
            log_weights,
            evals,
            step: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.particles[i * self.dim..(i + 1) * self.dim]
    }

    pub fn particles(&self) -> &[f64] {
        &self.particles
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn evals(&self) -> &[ParticleEval] {
        &self.evals
    }

    /// Number of observations assimilated so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Normalized weights.
    pub fn weights(&self) -> Result<Vec<f64>> {
        Ok(normalize(&self.log_weights)?.0)
    }

    pub fn ess(&self) -> Result<f64> {
        ess(&self.log_weights)
    }

    /// Rescales the log-weights to sum to one; returns the removed log-sum.
    fn normalize_in_place(&mut self) -> Result<f64> {
        let lse = log_sum_exp(&self.log_weights);
        if !lse.is_finite() {
            return Err(Error::Degenerate(format!(
                "all θ-weights vanished at observation {}",
                self.step + 1
            )));
        }
        for w in &mut self.log_weights {
            *w -= lse;
        }
        Ok(lse)
    }

    fn resample(&mut self, seed: u64, tags: &[u64]) -> Result<()> {
        let w = self.weights()?;
        let anc = ssp_ancestors(&w, w.len(), &mut stream(seed, tags))?;
        let mut particles = Vec::with_capacity(self.particles.len());
        let mut evals = Vec::with_capacity(self.len());
        for &a in &anc {
            particles.extend_from_slice(self.particle(a));
            evals.push(self.evals[a]);
        }
        self.particles = particles;
        self.evals = evals;
        let lw = -(self.len() as f64).ln();
        self.log_weights.iter_mut().for_each(|w| *w = lw);
        Ok(())
    }
}

/// Largest `γ ≤ 1` such that reweighting by `(γ - γ_cur) · increments`
/// keeps the ESS at or above `target_ess`, by bisection to
/// [`TEMPER_TOLERANCE`]. Returns 1 when the full step qualifies, and
/// `γ_cur + MIN_TEMPER_STEP` (capped at 1) when no step does.
pub fn next_temperature(current_gamma: f64, increments: &[f64], log_weights: &[f64], target_ess: f64) -> Result<f64> {
    if !(current_gamma < 1.0) {
        return Err(invalid("tempering already reached γ = 1"));
    }
    let span = 1.0 - current_gamma;
    let ok = |d: f64| -> Result<bool> {
        Ok(match ess_after(log_weights, increments, d) {
            Ok(e) => e >= target_ess,
            Err(Error::Degenerate(_)) => false,
            Err(e) => return Err(e),
        })
    };
    if target_ess <= 0.0 || ok(span)? {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0, span);
    while hi - lo > TEMPER_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if ok(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo == 0.0 {
        return Ok((current_gamma + MIN_TEMPER_STEP).min(1.0));
    }
    Ok(current_gamma + lo)
}

/// Independent Metropolis–Hastings on every particle, targeting
/// `eval(θ).log_target(gamma)` with proposal `q`. Returns the pooled
/// acceptance rate. Particle `i` draws from stream `(seed, tags.., i)`.
pub fn mh_rejuvenate<F>(
    cloud: &mut ThetaCloud,
    eval: F,
    gamma: f64,
    proposal: &dyn Proposal,
    n_steps: usize,
    seed: u64,
    tags: &[u64],
) -> Result<f64>
where
    F: Fn(&[f64]) -> ParticleEval + Sync,
{
    if n_steps == 0 || cloud.is_empty() {
        return Ok(1.0);
    }
    if proposal.dim() != cloud.dim {
        return Err(invalid("proposal dimension differs from the cloud"));
    }
    let dim = cloud.dim;
    let accepted: usize = cloud
        .particles
        .par_chunks_mut(dim)
        .zip(cloud.evals.par_iter_mut())
        .enumerate()
        .map(|(i, (th, ev))| {
            let mut tg = tags.to_vec();
            tg.push(i as u64);
            let mut rng = stream(seed, &tg);
            let mut n_acc = 0;
            let mut cur_q = proposal.log_density(th);
            let mut cur_t = ev.log_target(gamma);
            for _ in 0..n_steps {
                let prop = proposal.sample(&mut rng);
                let u: f64 = rng.random();
                let prop_q = proposal.log_density(&prop);
                if !prop_q.is_finite() {
                    continue;
                }
                let pe = eval(&prop);
                let prop_t = pe.log_target(gamma);
                if prop_t == f64::NEG_INFINITY || prop_t.is_nan() {
                    continue;
                }
                // A current particle the proposal cannot reach is never left.
                if !cur_q.is_finite() {
                    continue;
                }
                let log_ratio = (prop_t - cur_t) + (cur_q - prop_q);
                if u.ln() < log_ratio {
                    th.copy_from_slice(&prop);
                    *ev = pe;
                    cur_q = prop_q;
                    cur_t = prop_t;
                    n_acc += 1;
                }
            }
            n_acc
        })
        .sum();
    Ok(accepted as f64 / (n_steps * cloud.len()) as f64)
}

/// Result of absorbing one observation.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub log_evidence_increment: f64,
    pub h_increment: Option<ScoreIncrement<f64>>,
    pub ladder: TemperingLadder,
    pub diagnostics: StepDiagnostics<f64>,
}

fn evaluate(model: &dyn IidModel, past: &[&[f64]], y: &[f64], theta: &[f64]) -> ParticleEval {
    let log_prior = model.prior_log_density(theta);
    if log_prior == f64::NEG_INFINITY {
        return ParticleEval {
            log_prior,
            loglik_past: f64::NEG_INFINITY,
            loglik_current: f64::NEG_INFINITY,
        };
    }
    let loglik_past = past.iter().map(|r| model.log_likelihood(r, theta)).sum();
    ParticleEval {
        log_prior,
        loglik_past,
        loglik_current: model.log_likelihood(y, theta),
    }
}

/// Moves `cloud` from `p(θ | past)` to `p(θ | past, y)`.
///
/// The H increment is the posterior plug-in of the likelihood y-derivatives
/// at `y` under the updated cloud; pass `score = false` to skip it (e.g.
/// while the posterior is still improper).
pub fn assimilate_observation(
    cloud: &mut ThetaCloud,
    model: &dyn IidModel,
    past: &[&[f64]],
    y: &[f64],
    config: &SmcConfig,
    score: bool,
) -> Result<StepOutput> {
    let t = cloud.step as u64 + 1;
    let n = cloud.len();
    let dim = cloud.dim;
    let target = config.ess_threshold_ratio * n as f64;
    let eval = |th: &[f64]| evaluate(model, past, y, th);

    let mut current: Vec<f64> = cloud
        .particles
        .par_chunks(dim)
        .map(|th| model.log_likelihood(y, th))
        .collect();
    for (ev, &l) in cloud.evals.iter_mut().zip(&current) {
        ev.loglik_current = l;
    }
    cloud.normalize_in_place()?;
    let ess_before = cloud.ess()?;

    let mut gammas = vec![0.0];
    let mut gamma = 0.0;
    let mut log_ev = 0.0;
    let (mut acc_sum, mut acc_n) = (0.0, 0usize);
    let mut stage = 0u64;
    while gamma < 1.0 {
        let next = next_temperature(gamma, &current, &cloud.log_weights, target)?;
        let delta = next - gamma;
        for (w, &l) in cloud.log_weights.iter_mut().zip(&current) {
            *w += scaled(delta, l);
        }
        log_ev += cloud.normalize_in_place()?;
        gamma = next;
        gammas.push(gamma);
        stage += 1;
        if gammas.len() == LONG_LADDER + 1 {
            warn!("observation {t}: tempering ladder exceeds {LONG_LADDER} steps");
        }

        if gamma < 1.0 || cloud.ess()? < target {
            let w = cloud.weights()?;
            let proposal = fit_mixture_proposal(
                &cloud.particles,
                &w,
                dim,
                config.mixture_components,
                &mut stream(config.seed, &[tag::FIT, t, stage]),
            )?;
            cloud.resample(config.seed, &[tag::RESAMPLE, t, stage])?;
            let rate = mh_rejuvenate(
                cloud,
                eval,
                gamma,
                &proposal,
                config.mh_steps_per_temper,
                config.seed,
                &[tag::MOVE, t, stage],
            )?;
            if config.mh_steps_per_temper > 0 {
                acc_sum += rate;
                acc_n += 1;
            }
            current = cloud.evals.iter().map(|e| e.loglik_current).collect();
        }
    }

    for ev in &mut cloud.evals {
        ev.loglik_past += ev.loglik_current;
        ev.loglik_current = 0.0;
    }
    cloud.step += 1;

    let h_increment = if score {
        let w = cloud.weights()?;
        let (ws, ds): (Vec<f64>, Vec<_>) = w
            .iter()
            .enumerate()
            .filter(|(_, &wi)| wi > 0.0)
            .map(|(i, &wi)| (wi, model.likelihood_y_derivs(y, cloud.particle(i))))
            .unzip();
        let total: f64 = ws.iter().sum();
        let ws: Vec<f64> = ws.iter().map(|v| v / total).collect();
        Some(hscore_increment_from_derivs(&ws, &ds)?)
    } else {
        None
    };
    let ladder = TemperingLadder { gammas };
    debug!("observation {t}: {} tempering steps, ESS before {ess_before:.1}", ladder.n_steps());
    Ok(StepOutput {
        log_evidence_increment: log_ev,
        h_increment,
        diagnostics: StepDiagnostics {
            ess_before: Some(ess_before),
            n_temper_steps: ladder.n_steps(),
            acceptance_rate: (acc_n > 0).then(|| acc_sum / acc_n as f64),
            ..Default::default()
        },
        ladder,
    })
}

/// Draws the initial cloud. Returns it with `log(mean importance weight)`
/// of the start, which is 0 for draws from a proper prior.
pub fn initial_cloud(model: &dyn IidModel, config: &SmcConfig) -> Result<(ThetaCloud, f64)> {
    let dim = model.dim_theta();
    let n = config.n_theta;
    let mut particles = Vec::with_capacity(n * dim);
    let mut log_weights = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream(config.seed, &[tag::INIT, i as u64]);
        match &config.init_proposal {
            Some(q) => {
                if q.dim() != dim {
                    return Err(invalid("initial proposal dimension differs from the model"));
                }
                let th = q.sample(&mut rng);
                log_weights.push(model.prior_log_density(&th) - q.log_density(&th));
                particles.extend(th);
            }
            None => {
                let th = model.sample_prior(&mut rng).ok_or_else(|| {
                    invalid(format!("{} has an improper prior; an initial proposal is required", model.name()))
                })?;
                log_weights.push(0.0);
                particles.extend(th);
            }
        }
    }
    if log_weights.iter().any(|w| w.is_nan()) {
        return Err(invalid("initial importance weight is NaN"));
    }
    let correction = log_sum_exp(&log_weights) - (n as f64).ln();
    if !correction.is_finite() {
        return Err(Error::Degenerate("initial proposal misses the prior support".into()));
    }
    Ok((ThetaCloud::new(model, particles, log_weights)?, correction))
}

/// Full prequential run over `data`, optionally reordered by `permutation`.
pub fn run_smc(
    model: &dyn IidModel,
    data: &Dataset,
    config: &SmcConfig,
    permutation: Option<&[usize]>,
) -> Result<PrequentialTrace<f64>> {
    let mut trace = PrequentialTrace::new(model.first_proper_index());
    run_smc_into(model, data, config, permutation, &mut trace)?;
    Ok(trace)
}

/// Same as [`run_smc`], appending to `trace` row by row so that the prefix
/// survives a failure. `trace` must be empty and built with the model's
/// first proper index.
pub fn run_smc_into(
    model: &dyn IidModel,
    data: &Dataset,
    config: &SmcConfig,
    permutation: Option<&[usize]>,
    trace: &mut PrequentialTrace<f64>,
) -> Result<()> {
    config.validate()?;
    if data.is_empty() {
        return Err(invalid("empty dataset"));
    }
    if !trace.is_empty() {
        return Err(invalid("trace must start empty"));
    }
    if data.dim_y != model.dim_y() {
        return Err(invalid(format!(
            "{} expects {}-dimensional observations, data has {}",
            model.name(),
            model.dim_y(),
            data.dim_y
        )));
    }
    let owned;
    let data = match permutation {
        Some(p) => {
            owned = data.permuted(p)?;
            &owned
        }
        None => data,
    };
    let (mut cloud, correction) = initial_cloud(model, config)?;
    let rows: Vec<&[f64]> = (0..data.len()).map(|t| data.row(t)).collect();
    for t in 0..data.len() {
        let score = t + 1 >= trace.first_scored();
        let out = assimilate_observation(&mut cloud, model, &rows[..t], rows[t], config, score)?;
        let inc = out.log_evidence_increment + if t == 0 { correction } else { 0.0 };
        trace.push(inc, out.h_increment, out.diagnostics);
    }
    Ok(())
}
