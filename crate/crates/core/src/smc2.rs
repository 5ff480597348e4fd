//! SMC² for state-space models.
//!
//! Every θ-particle carries a bootstrap particle filter over the latent
//! state. The filter's likelihood increments reweight the θ-cloud; its
//! filtered measurement derivatives give the H-score increment through the
//! identities
//!
//! ```text
//! ∂ log p(y_t | y_{1:t-1}, θ) = E[∂ log g_θ(y_t | X_t) | y_{1:t}, θ]
//! ∂² log p + (∂ log p)²       = E[∂² log g_θ + (∂ log g_θ)² | y_{1:t}, θ]
//! ```
//!
//! averaged over θ under `p(θ | y_{1:t})`. Models without usable
//! derivatives go through kernel density estimates of the per-θ predictive
//! (`HscoreMode::Kde`), and count models through Monte Carlo estimates of the
//! predictive pmf at `y_t` and its neighbours.

use std::collections::HashMap;

use log::{debug, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kde::{kde_hscore_increment, KdeEstimate};
use crate::mixture::{fit_mixture_proposal, Proposal};
use crate::models::{Dataset, ObservationKind, SsmModel};
use crate::resample::ssp_ancestors;
use crate::rng::{stream, tag, StreamRng};
use crate::scoring::{discrete_hscore, DiscreteSupport, ScoreIncrement};
use crate::trace::{PrequentialTrace, StepDiagnostics};
use crate::weights::{ess, log_sum_exp, normalize};

/// Inner filters resample when their ESS drops below this fraction of `N_x`.
pub const X_RESAMPLE_RATIO: f64 = 0.5;

/// How the continuous H increment is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HscoreMode {
    /// Filtered measurement derivatives.
    #[default]
    Derivative,
    /// Kernel density estimates from simulated predictive draws.
    Kde,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Smc2Config {
    pub n_theta: usize,
    pub n_x_init: usize,
    /// Upper bound for the adaptive number of x-particles.
    pub n_x_max: usize,
    pub ess_threshold_ratio: f64,
    /// Double `N_x` when the PMMH acceptance rate falls below this.
    pub acceptance_floor: f64,
    pub mh_steps: usize,
    pub mixture_components: usize,
    /// Ignored for count observations, which always use the discrete score.
    pub hscore_mode: HscoreMode,
    pub kde_draws: usize,
    pub kde_bandwidth: f64,
    pub seed: u64,
}

impl Default for Smc2Config {
    fn default() -> Self {
        Self {
            n_theta: 1024,
            n_x_init: 128,
            n_x_max: 4096,
            ess_threshold_ratio: 0.5,
            acceptance_floor: 0.15,
            mh_steps: 3,
            mixture_components: 5,
            hscore_mode: HscoreMode::Derivative,
            kde_draws: 1024,
            kde_bandwidth: 0.1,
            seed: 0,
        }
    }
}

impl Smc2Config {
    pub fn validate(&self) -> Result<()> {
        if self.n_theta < 2 || self.n_x_init < 2 {
            return Err(invalid("n_theta and n_x_init must be at least 2"));
        }
        if self.n_x_max < self.n_x_init {
            return Err(invalid("n_x_max must be at least n_x_init"));
        }
        if !(self.ess_threshold_ratio > 0.0 && self.ess_threshold_ratio < 1.0) {
            return Err(invalid("ess_threshold_ratio must lie in (0, 1)"));
        }
        if !(self.acceptance_floor > 0.0 && self.acceptance_floor < 1.0) {
            return Err(invalid("acceptance_floor must lie in (0, 1)"));
        }
        if self.mixture_components == 0 {
            return Err(invalid("mixture_components must be positive"));
        }
        if self.kde_draws < 2 || !(self.kde_bandwidth > 0.0) {
            return Err(invalid("kde_draws must be at least 2 and kde_bandwidth positive"));
        }
        Ok(())
    }
}

/// Weighted latent particles of one θ, row-major `n_x × dim_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct XCloud {
    dim: usize,
    states: Vec<f64>,
    log_weights: Vec<f64>,
    loglik_cum: f64,
    started: bool,
}

/// Filtered expectations `E[∂ log g]` (per coordinate) and
/// `E[Δ log g + ‖∇ log g‖²]` under the updated x-weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredMoments {
    pub mean_d1: Vec<f64>,
    pub mean_second: f64,
}

/// Output of one particle-filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct PfStep {
    /// `log p̂(y_t | y_{1:t-1}, θ)`; `-inf` when no particle is compatible.
    pub loglik_increment: f64,
    pub filtered: Option<FilteredMoments>,
}

impl XCloud {
    /// Cloud of `n_x` particles that has not seen any observation.
    pub fn new(dim_x: usize, n_x: usize) -> Result<Self> {
        if n_x == 0 || dim_x == 0 {
            return Err(invalid("an x-cloud needs particles and a state dimension"));
        }
        Ok(Self {
            dim: dim_x,
            states: vec![0.0; n_x * dim_x],
            log_weights: vec![-(n_x as f64).ln(); n_x],
            loglik_cum: 0.0,
            started: false,
        })
    }

    /// Cloud with explicit states and equal weights, positioned after some
    /// observation (the next step applies the transition).
    pub fn from_states(dim_x: usize, states: Vec<f64>) -> Result<Self> {
        if dim_x == 0 || states.is_empty() || states.len() % dim_x != 0 {
            return Err(invalid("states do not fill whole rows"));
        }
        let n = states.len() / dim_x;
        Ok(Self {
            dim: dim_x,
            states,
            log_weights: vec![-(n as f64).ln(); n],
            loglik_cum: 0.0,
            started: true,
        })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn state(&self, j: usize) -> &[f64] {
        &self.states[j * self.dim..(j + 1) * self.dim]
    }

    /// Normalized log-weights.
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Accumulated `log p̂(y_{1:t} | θ)`.
    pub fn loglik(&self) -> f64 {
        self.loglik_cum
    }

    /// Resamples if needed, then draws `x_1` (first step) or applies the
    /// transition across `gap`. Weights stay those of the previous step, so
    /// the cloud now represents the one-step predictive of the state.
    fn propagate(&mut self, model: &dyn SsmModel, theta: &[f64], gap: f64, rng: &mut StreamRng) -> Result<()> {
        let n = self.len();
        if !self.started {
            for x in self.states.chunks_mut(self.dim) {
                model.sample_initial(theta, x, rng);
            }
            self.started = true;
            return Ok(());
        }
        if ess(&self.log_weights)? < X_RESAMPLE_RATIO * n as f64 {
            let w = normalize(&self.log_weights)?.0;
            let anc = ssp_ancestors(&w, n, rng)?;
            let mut states = Vec::with_capacity(self.states.len());
            for &a in &anc {
                states.extend_from_slice(self.state(a));
            }
            self.states = states;
            self.log_weights.iter_mut().for_each(|w| *w = -(n as f64).ln());
        }
        for x in self.states.chunks_mut(self.dim) {
            model.transition(theta, x, gap, rng);
        }
        Ok(())
    }

    /// Reweights by `g_θ(y | x)`; returns the log-likelihood increment.
    fn weigh(&mut self, model: &dyn SsmModel, theta: &[f64], y: &[f64]) -> f64 {
        let mut lw: Vec<f64> = self
            .states
            .chunks(self.dim)
            .zip(&self.log_weights)
            .map(|(x, &w)| {
                let g = model.measurement_log_density(y, x, theta);
                if g.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    w + g
                }
            })
            .collect();
        let inc = log_sum_exp(&lw);
        if inc.is_finite() {
            lw.iter_mut().for_each(|w| *w -= inc);
            self.log_weights = lw;
            self.loglik_cum += inc;
            inc
        } else {
            // keep the predictive weights; the θ-particle is dead anyway
            self.loglik_cum = f64::NEG_INFINITY;
            f64::NEG_INFINITY
        }
    }

    fn filtered_moments(&self, model: &dyn SsmModel, theta: &[f64], y: &[f64]) -> Result<FilteredMoments> {
        let dy = y.len();
        let mut mean_d1 = vec![0.0; dy];
        let mut mean_second = 0.0;
        for (x, &lw) in self.states.chunks(self.dim).zip(&self.log_weights) {
            let w = lw.exp();
            if w == 0.0 {
                continue;
            }
            let d = model.measurement_y_derivs(y, x, theta).ok_or_else(|| {
                Error::Scoring(format!(
                    "{} has no measurement derivatives here; use the kernel density mode",
                    model.name()
                ))
            })?;
            d.check_finite()?;
            let mut sq = 0.0;
            for k in 0..dy {
                mean_d1[k] += w * d.grad_log[k];
                sq += d.grad_log[k] * d.grad_log[k];
            }
            mean_second += w * (d.lap_log + sq);
        }
        Ok(FilteredMoments { mean_d1, mean_second })
    }

    /// `n` predictive draws of `y`: SSP-resampled predictive states, one
    /// measurement each.
    fn predictive_draws(&self, model: &dyn SsmModel, theta: &[f64], n: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
        let w = normalize(&self.log_weights)?.0;
        let anc = ssp_ancestors(&w, n, rng)?;
        anc.iter()
            .map(|&a| {
                model
                    .sample_measurement(self.state(a), theta, rng)
                    .map(|y| y[0])
                    .ok_or_else(|| invalid(format!("{} cannot simulate measurements", model.name())))
            })
            .collect()
    }

    /// `log p̂(z | y_{1:t-1}, θ)` at each probe `z`, from the predictive
    /// states and weights.
    fn predictive_log_pmf(&self, model: &dyn SsmModel, theta: &[f64], y: &[i64], probes: &[Vec<i64>]) -> Vec<f64> {
        let dy = y.len();
        let coordwise = model
            .measurement_coord_log_pmf(0, y[0], self.state(0), theta)
            .is_some();
        let mut per_particle: Vec<Vec<f64>> = Vec::with_capacity(self.len());
        let mut zf = vec![0.0; dy];
        for (x, &lw) in self.states.chunks(self.dim).zip(&self.log_weights) {
            if coordwise {
                // log g_k(y_k + off) for off in -2..=2
                let table: Vec<[f64; 5]> = (0..dy)
                    .map(|k| {
                        let mut row = [f64::NEG_INFINITY; 5];
                        for (o, slot) in row.iter_mut().enumerate() {
                            *slot = model
                                .measurement_coord_log_pmf(k, y[k] + o as i64 - 2, x, theta)
                                .unwrap_or(f64::NEG_INFINITY);
                        }
                        row
                    })
                    .collect();
                let base: f64 = table.iter().map(|r| r[2]).sum();
                per_particle.push(
                    probes
                        .iter()
                        .map(|z| {
                            let mut v = base;
                            for k in 0..dy {
                                let off = z[k] - y[k];
                                if off != 0 {
                                    v = v - table[k][2] + table[k][(off + 2) as usize];
                                }
                            }
                            if v.is_nan() {
                                f64::NEG_INFINITY
                            } else {
                                lw + v
                            }
                        })
                        .collect(),
                );
            } else {
                per_particle.push(
                    probes
                        .iter()
                        .map(|z| {
                            for k in 0..dy {
                                zf[k] = z[k] as f64;
                            }
                            lw + model.measurement_log_density(&zf, x, theta)
                        })
                        .collect(),
                );
            }
        }
        (0..probes.len())
            .map(|p| {
                let col: Vec<f64> = per_particle.iter().map(|r| r[p]).collect();
                log_sum_exp(&col)
            })
            .collect()
    }
}

/// One bootstrap filter step for parameter `theta`: propagate across `gap`
/// (or initialize), weight by `g_θ(y | x)`, and report the filtered
/// derivative moments when the model provides measurement derivatives.
pub fn pf_step(
    xc: &mut XCloud,
    theta: &[f64],
    y: &[f64],
    gap: f64,
    model: &dyn SsmModel,
    rng: &mut StreamRng,
) -> Result<PfStep> {
    xc.propagate(model, theta, gap, rng)?;
    let inc = xc.weigh(model, theta, y);
    let filtered = if inc.is_finite() {
        match xc.filtered_moments(model, theta, y) {
            Ok(m) => Some(m),
            Err(Error::Scoring(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(PfStep {
        loglik_increment: inc,
        filtered,
    })
}

/// Fresh filter with `n_x` particles run over the first `upto` rows.
pub fn run_pf(
    model: &dyn SsmModel,
    theta: &[f64],
    data: &Dataset,
    upto: usize,
    n_x: usize,
    rng: &mut StreamRng,
) -> Result<XCloud> {
    let mut xc = XCloud::new(model.dim_x(), n_x)?;
    for t in 0..upto.min(data.len()) {
        xc.propagate(model, theta, data.gap(t), rng)?;
        if xc.weigh(model, theta, data.row(t)) == f64::NEG_INFINITY {
            break;
        }
    }
    Ok(xc)
}

/// Joint `(θ, x)` particle system.
#[derive(Debug, Clone)]
pub struct Smc2Cloud {
    dim_theta: usize,
    thetas: Vec<f64>,
    log_weights: Vec<f64>,
    log_priors: Vec<f64>,
    x_clouds: Vec<XCloud>,
    n_x: usize,
    step: usize,
}

impl Smc2Cloud {
    /// Cloud over the given parameters (row-major), equal weights, fresh
    /// filters of `n_x` particles.
    pub fn from_thetas(model: &dyn SsmModel, thetas: Vec<f64>, n_x: usize) -> Result<Self> {
        let d = model.dim_theta();
        if thetas.is_empty() || thetas.len() % d != 0 {
            return Err(invalid("parameter matrix does not fill whole rows"));
        }
        let n = thetas.len() / d;
        let log_priors: Vec<f64> = thetas.chunks(d).map(|th| model.prior_log_density(th)).collect();
        if log_priors.iter().any(|p| !p.is_finite()) {
            return Err(invalid("initial parameter outside the prior support"));
        }
        Ok(Self {
            dim_theta: d,
            thetas,
            log_weights: vec![-(n as f64).ln(); n],
            log_priors,
            x_clouds: (0..n).map(|_| XCloud::new(model.dim_x(), n_x)).collect::<Result<_>>()?,
            n_x,
            step: 0,
        })
    }

    /// Prior draws, particle `i` from stream `(seed, INIT, i)`.
    pub fn from_prior(model: &dyn SsmModel, config: &Smc2Config) -> Result<Self> {
        let mut thetas = Vec::with_capacity(config.n_theta * model.dim_theta());
        for i in 0..config.n_theta {
            let th = model
                .sample_prior(&mut stream(config.seed, &[tag::INIT, i as u64]))
                .ok_or_else(|| invalid(format!("{} has no prior sampler", model.name())))?;
            thetas.extend(th);
        }
        Self::from_thetas(model, thetas, config.n_x_init)
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn theta(&self, i: usize) -> &[f64] {
        &self.thetas[i * self.dim_theta..(i + 1) * self.dim_theta]
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn x_cloud(&self, i: usize) -> &XCloud {
        &self.x_clouds[i]
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Result<Vec<f64>> {
        Ok(normalize(&self.log_weights)?.0)
    }

    pub fn ess(&self) -> Result<f64> {
        ess(&self.log_weights)
    }

    fn resample(&mut self, seed: u64, tags: &[u64]) -> Result<()> {
        let w = self.weights()?;
        let n = w.len();
        let anc = ssp_ancestors(&w, n, &mut stream(seed, tags))?;
        let mut thetas = Vec::with_capacity(self.thetas.len());
        for &a in &anc {
            thetas.extend_from_slice(self.theta(a));
        }
        self.thetas = thetas;
        self.log_priors = anc.iter().map(|&a| self.log_priors[a]).collect();
        self.x_clouds = anc.iter().map(|&a| self.x_clouds[a].clone()).collect();
        self.log_weights = vec![-(n as f64).ln(); n];
        Ok(())
    }
}

/// Result of absorbing one observation.
#[derive(Debug, Clone)]
pub struct Smc2StepOutput {
    pub log_evidence_increment: f64,
    pub h_increment: Option<ScoreIncrement<f64>>,
    pub diagnostics: StepDiagnostics<f64>,
}

enum Predictive {
    None,
    Kde(KdeEstimate<f64>),
    Pmf(Vec<f64>),
}

struct ThetaStep {
    pf: PfStep,
    predictive: Predictive,
}

/// Assembles the H increment from per-θ filtered moments: the θ-average
/// under `theta_weights` (normalized) of `E[∂ log g]` and
/// `E[Δ log g + ‖∇ log g‖²]`, then `2 Ê[second] - ‖Ê[∂ log g]‖²`.
pub fn collapse_filtered_moments(theta_weights: &[f64], moments: &[Option<FilteredMoments>]) -> Result<ScoreIncrement<f64>> {
    if theta_weights.len() != moments.len() {
        return Err(invalid("one moment set per θ weight required"));
    }
    let mut mean_d1: Vec<f64> = Vec::new();
    let mut mean_second = 0.0;
    let mut total = 0.0;
    for (&w, m) in theta_weights.iter().zip(moments) {
        if w == 0.0 {
            continue;
        }
        let m = m.as_ref().ok_or_else(|| {
            Error::Scoring("a weighted θ-particle has no filtered derivatives".into())
        })?;
        if mean_d1.is_empty() {
            mean_d1 = vec![0.0; m.mean_d1.len()];
        }
        for (a, &b) in mean_d1.iter_mut().zip(&m.mean_d1) {
            *a += w * b;
        }
        mean_second += w * m.mean_second;
        total += w;
    }
    if !(total > 0.0) {
        return Err(Error::Degenerate("no θ-particle carries weight".into()));
    }
    mean_d1.iter_mut().for_each(|a| *a /= total);
    Ok(ScoreIncrement::from_moments(mean_d1, mean_second / total))
}

/// Discrete H increment from per-θ predictive log-pmfs at the probe points
/// and the pre-update θ log-weights (normalized).
fn discrete_increment(
    y: &[i64],
    probes: &[Vec<i64>],
    per_theta: &[&[f64]],
    pre_log_weights: &[f64],
    support: &DiscreteSupport,
) -> Result<f64> {
    let mut table = HashMap::with_capacity(probes.len());
    for (p, z) in probes.iter().enumerate() {
        let col: Vec<f64> = per_theta
            .iter()
            .zip(pre_log_weights)
            .map(|(lp, &lw)| lw + lp[p])
            .collect();
        table.insert(z.clone(), log_sum_exp(&col));
    }
    if !table.get(y).is_some_and(|v| v.is_finite()) {
        return Err(Error::Scoring(format!("estimated predictive pmf vanishes at {y:?}")));
    }
    discrete_hscore(y, |z: &[i64]| table.get(z).copied().unwrap_or(f64::NAN), support)
}

/// Monte Carlo discrete H increment at `y` from the cloud as it stands
/// *before* assimilating `y`: each θ's filter is propagated on a copy, the
/// predictive pmf is averaged over x-particles and the current θ-weights.
pub fn discrete_hscore_increment_smc2(
    cloud: &Smc2Cloud,
    y: &[f64],
    gap: f64,
    model: &dyn SsmModel,
    seed: u64,
) -> Result<f64> {
    let ObservationKind::Discrete(support) = model.observation_kind() else {
        return Err(invalid(format!("{} has continuous observations", model.name())));
    };
    let yi = to_counts(y)?;
    let probes = support.probe_points(&yi);
    let pre = normalize(&cloud.log_weights)?.0;
    let pre_lw: Vec<f64> = pre.iter().map(|w| w.ln()).collect();
    let t = cloud.step as u64 + 1;
    let per: Vec<Vec<f64>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let mut xc = cloud.x_clouds[i].clone();
            let mut rng = stream(seed, &[tag::PF, t, i as u64]);
            xc.propagate(model, cloud.theta(i), gap, &mut rng)?;
            Ok(xc.predictive_log_pmf(model, cloud.theta(i), &yi, &probes))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&[f64]> = per.iter().map(|v| v.as_slice()).collect();
    discrete_increment(&yi, &probes, &refs, &pre_lw, &support)
}

fn to_counts(y: &[f64]) -> Result<Vec<i64>> {
    y.iter()
        .map(|&v| {
            if v.is_finite() && v.fract() == 0.0 {
                Ok(v as i64)
            } else {
                Err(invalid(format!("count observation {v} is not an integer")))
            }
        })
        .collect()
}

/// Absorbs row `t` of `data` (0-based; earlier rows already assimilated),
/// then resamples and rejuvenates when the θ-ESS falls below threshold.
pub fn smc2_assimilate(
    cloud: &mut Smc2Cloud,
    data: &Dataset,
    t: usize,
    model: &dyn SsmModel,
    config: &Smc2Config,
    score: bool,
) -> Result<Smc2StepOutput> {
    if t != cloud.step {
        return Err(invalid(format!("cloud is at step {}, asked to assimilate row {t}", cloud.step)));
    }
    let y = data.row(t);
    let gap = data.gap(t);
    let tt = t as u64 + 1;
    let kind = model.observation_kind();
    let discrete = match &kind {
        ObservationKind::Discrete(s) => Some((s.clone(), to_counts(y)?)),
        ObservationKind::Continuous => None,
    };
    let kde = discrete.is_none() && config.hscore_mode == HscoreMode::Kde;
    if kde && model.dim_y() != 1 {
        return Err(invalid("kernel density scoring supports univariate observations only"));
    }
    let probes = discrete.as_ref().map(|(s, yi)| s.probe_points(yi));

    let pre_lw = {
        let lse = log_sum_exp(&cloud.log_weights);
        if !lse.is_finite() {
            return Err(Error::Degenerate("all θ-weights vanished".into()));
        }
        cloud.log_weights.iter().map(|w| w - lse).collect::<Vec<f64>>()
    };
    let ess_before = ess(&pre_lw)?;
    let dim = cloud.dim_theta;
    let steps: Vec<ThetaStep> = cloud
        .x_clouds
        .par_iter_mut()
        .zip(cloud.thetas.par_chunks(dim))
        .zip(pre_lw.par_iter())
        .enumerate()
        .map(|(i, ((xc, th), &lw))| -> Result<ThetaStep> {
            let mut rng = stream(config.seed, &[tag::PF, tt, i as u64]);
            if lw == f64::NEG_INFINITY {
                return Ok(ThetaStep {
                    pf: PfStep {
                        loglik_increment: f64::NEG_INFINITY,
                        filtered: None,
                    },
                    predictive: Predictive::None,
                });
            }
            xc.propagate(model, th, gap, &mut rng)?;
            let predictive = if let (Some((_, yi)), Some(pr)) = (&discrete, &probes) {
                if score {
                    Predictive::Pmf(xc.predictive_log_pmf(model, th, yi, pr))
                } else {
                    Predictive::None
                }
            } else if kde && score {
                let mut krng = stream(config.seed, &[tag::KDE, tt, i as u64]);
                let draws = xc.predictive_draws(model, th, config.kde_draws, &mut krng)?;
                Predictive::Kde(KdeEstimate::new(draws, config.kde_bandwidth)?)
            } else {
                Predictive::None
            };
            let inc = xc.weigh(model, th, y);
            let filtered = if inc.is_finite() && score && !kde && discrete.is_none() {
                Some(xc.filtered_moments(model, th, y)?)
            } else {
                None
            };
            Ok(ThetaStep {
                pf: PfStep {
                    loglik_increment: inc,
                    filtered,
                },
                predictive,
            })
        })
        .collect::<Result<_>>()?;

    let n_dead = steps.iter().filter(|s| s.pf.loglik_increment == f64::NEG_INFINITY).count();
    if n_dead * 100 > cloud.len() {
        debug!("observation {tt}: {n_dead} θ-particles have a zero likelihood estimate");
    }
    cloud.log_weights = pre_lw
        .iter()
        .zip(&steps)
        .map(|(&w, s)| w + s.pf.loglik_increment)
        .map(|w| if w.is_nan() { f64::NEG_INFINITY } else { w })
        .collect();
    let log_ev = log_sum_exp(&cloud.log_weights);
    if !log_ev.is_finite() {
        return Err(Error::Degenerate(format!(
            "every θ-particle has a zero likelihood estimate at observation {tt}"
        )));
    }
    cloud.log_weights.iter_mut().for_each(|w| *w -= log_ev);
    cloud.step += 1;

    let mut diagnostics = StepDiagnostics {
        ess_before: Some(ess_before),
        n_temper_steps: 1,
        n_x: Some(cloud.n_x),
        ..Default::default()
    };
    let h_increment = if !score {
        None
    } else if let (Some((support, yi)), Some(pr)) = (&discrete, &probes) {
        let per: Vec<&[f64]> = steps
            .iter()
            .map(|s| match &s.predictive {
                Predictive::Pmf(v) => v.as_slice(),
                _ => &[],
            })
            .collect();
        let live: Vec<usize> = (0..per.len()).filter(|&i| !per[i].is_empty()).collect();
        let per_live: Vec<&[f64]> = live.iter().map(|&i| per[i]).collect();
        let lw_live: Vec<f64> = live.iter().map(|&i| pre_lw[i]).collect();
        match discrete_increment(yi, pr, &per_live, &lw_live, support) {
            Ok(v) => Some(ScoreIncrement::scalar(v)),
            Err(Error::Scoring(msg)) => {
                warn!("observation {tt}: discrete score unavailable ({msg})");
                diagnostics.unreliable = true;
                None
            }
            Err(e) => return Err(e),
        }
    } else if kde {
        let w = cloud.weights()?;
        let (ests, ws): (Vec<KdeEstimate<f64>>, Vec<f64>) = steps
            .into_iter()
            .zip(&w)
            .filter(|(_, &wi)| wi > 0.0)
            .filter_map(|(s, &wi)| match s.predictive {
                Predictive::Kde(e) => Some((e, wi)),
                _ => None,
            })
            .unzip();
        let total: f64 = ws.iter().sum();
        let ws: Vec<f64> = ws.iter().map(|v| v / total).collect();
        let (inc, kd) = kde_hscore_increment(&ests, &ws, y[0])?;
        diagnostics.kde_excluded = kd.excluded;
        diagnostics.unreliable = kd.unreliable;
        Some(inc)
    } else {
        let w = cloud.weights()?;
        let moments: Vec<Option<FilteredMoments>> = steps.into_iter().map(|s| s.pf.filtered).collect();
        Some(collapse_filtered_moments(&w, &moments)?)
    };

    if cloud.ess()? < config.ess_threshold_ratio * cloud.len() as f64 {
        let rate = pmmh_rejuvenate(cloud, data, model, config)?;
        diagnostics.acceptance_rate = Some(rate);
        adapt_nx(cloud, rate, data, model, config)?;
        diagnostics.n_x = Some(cloud.n_x);
    }
    Ok(Smc2StepOutput {
        log_evidence_increment: log_ev,
        h_increment,
        diagnostics,
    })
}

/// Resample-move step: SSP resampling of the θ-cloud, then `mh_steps`
/// particle-marginal independent MH moves per particle with a mixture
/// proposal fitted to the weighted cloud. Each proposal reruns a filter
/// over the assimilated prefix. Returns the pooled acceptance rate.
pub fn pmmh_rejuvenate(cloud: &mut Smc2Cloud, data: &Dataset, model: &dyn SsmModel, config: &Smc2Config) -> Result<f64> {
    let t = cloud.step as u64;
    let w = cloud.weights()?;
    let proposal = fit_mixture_proposal(
        &cloud.thetas,
        &w,
        cloud.dim_theta,
        config.mixture_components,
        &mut stream(config.seed, &[tag::FIT, t]),
    )?;
    cloud.resample(config.seed, &[tag::RESAMPLE, t])?;
    pmmh_moves(cloud, data, model, &proposal, config.mh_steps, config.seed)
}

/// PMMH moves with a given proposal on an equally weighted cloud.
pub fn pmmh_moves(
    cloud: &mut Smc2Cloud,
    data: &Dataset,
    model: &dyn SsmModel,
    proposal: &dyn Proposal,
    n_steps: usize,
    seed: u64,
) -> Result<f64> {
    if n_steps == 0 {
        return Ok(1.0);
    }
    let t = cloud.step;
    let n_x = cloud.n_x;
    let dim = cloud.dim_theta;
    let accepted: usize = cloud
        .thetas
        .par_chunks_mut(dim)
        .zip(cloud.x_clouds.par_iter_mut())
        .zip(cloud.log_priors.par_iter_mut())
        .enumerate()
        .map(|(i, ((th, xc), lp))| -> Result<usize> {
            let mut rng = stream(seed, &[tag::PMMH, t as u64, i as u64]);
            let mut acc = 0;
            for _ in 0..n_steps {
                let prop = proposal.sample(&mut rng);
                let u: f64 = rng.random();
                let prop_lp = model.prior_log_density(&prop);
                if !prop_lp.is_finite() {
                    continue;
                }
                let cur_q = proposal.log_density(th);
                let prop_q = proposal.log_density(&prop);
                if !cur_q.is_finite() || !prop_q.is_finite() {
                    continue;
                }
                let new_xc = run_pf(model, &prop, data, t, n_x, &mut rng)?;
                let log_ratio = (prop_lp + new_xc.loglik()) - (*lp + xc.loglik()) + (cur_q - prop_q);
                if u.ln() < log_ratio {
                    th.copy_from_slice(&prop);
                    *xc = new_xc;
                    *lp = prop_lp;
                    acc += 1;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum();
    Ok(accepted as f64 / (n_steps * cloud.len()) as f64)
}

/// Doubles `N_x` (up to `n_x_max`) when the acceptance rate is below the
/// floor, rebuilding every filter over the assimilated prefix. θ-particles
/// and their weights are kept. Returns whether the cloud changed.
pub fn adapt_nx(
    cloud: &mut Smc2Cloud,
    acceptance_rate: f64,
    data: &Dataset,
    model: &dyn SsmModel,
    config: &Smc2Config,
) -> Result<bool> {
    if acceptance_rate >= config.acceptance_floor {
        return Ok(false);
    }
    if cloud.n_x >= config.n_x_max {
        warn!("acceptance {acceptance_rate:.3} below floor but N_x is capped at {}", config.n_x_max);
        return Ok(false);
    }
    let n_x = (2 * cloud.n_x).min(config.n_x_max);
    let t = cloud.step;
    let dim = cloud.dim_theta;
    cloud.x_clouds = cloud
        .thetas
        .par_chunks(dim)
        .enumerate()
        .map(|(i, th)| run_pf(model, th, data, t, n_x, &mut stream(config.seed, &[tag::REBUILD, t as u64, i as u64])))
        .collect::<Result<_>>()?;
    cloud.n_x = n_x;
    debug!("observation {t}: N_x doubled to {n_x}");
    Ok(true)
}

/// Full SMC² run over `data`.
pub fn run_smc2(model: &dyn SsmModel, data: &Dataset, config: &Smc2Config) -> Result<PrequentialTrace<f64>> {
    let mut trace = PrequentialTrace::new(0);
    run_smc2_into(model, data, config, &mut trace)?;
    Ok(trace)
}

/// Same as [`run_smc2`], appending rows to `trace` as they are produced so
/// that the prefix survives a failure. `trace` must be empty.
pub fn run_smc2_into(
    model: &dyn SsmModel,
    data: &Dataset,
    config: &Smc2Config,
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
    let mut cloud = Smc2Cloud::from_prior(model, config)?;
    for t in 0..data.len() {
        let score = t + 1 >= trace.first_scored();
        let out = smc2_assimilate(&mut cloud, data, t, model, config, score)?;
        trace.push(out.log_evidence_increment, out.h_increment, out.diagnostics);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{nb_log_pmf, simulate_ssm, KangarooModel, KangarooVariant, LgssmModel};
    use crate::oracle::{kalman_predictive, kalman_predictives, LgssmParams};
    use crate::scoring::{hscore_increment_from_derivs, hyvarinen_point, DensityDerivatives};

    fn lgssm_data(t_len: usize, seed: u64) -> (LgssmModel, Dataset) {
        let m = LgssmModel::new(0.8, 0.5, 1.0, 4.0).unwrap();
        let times: Vec<f64> = (1..=t_len).map(|t| t as f64).collect();
        let ds = simulate_ssm(&m, &[0.5], &times, &mut stream(seed, &[tag::DATA])).unwrap();
        (m, ds)
    }

    fn mean_se(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (v / n).sqrt())
    }

    #[test]
    fn deterministic_latent_gives_exact_score() {
        // x at the level stays there when σ_x ≈ 0
        let m = LgssmModel::new(0.8, 1e-300, 0.7, 1.0).unwrap();
        let mut xc = XCloud::from_states(1, vec![0.4; 8]).unwrap();
        let mut rng = stream(1, &[]);
        let out = pf_step(&mut xc, &[0.4], &[1.1], 1.0, &m, &mut rng).unwrap();
        let f = out.filtered.unwrap();
        assert!((f.mean_d1[0] - (0.4 - 1.1) / 0.49).abs() < 1e-12);
    }

    #[test]
    fn filtered_score_matches_kalman() {
        let (m, ds) = lgssm_data(10, 3);
        let params = m.params_at(0.5);
        let n = 10_000;
        let mut xc = XCloud::new(1, n).unwrap();
        let mut rng = stream(4, &[]);
        let mut last = None;
        for t in 0..ds.len() {
            last = Some(pf_step(&mut xc, &[0.5], ds.row(t), ds.gap(t), &m, &mut rng).unwrap());
        }
        // ∂ log p(y_T | y_{1:T-1}) = -(y - m) / v, from the Kalman predictive
        let pred = kalman_predictive(&params, &ds.values[..ds.len() - 1]).unwrap();
        let y = ds.values[ds.len() - 1];
        let exact = -(y - pred.mean) / pred.variance;
        let w: Vec<f64> = xc.log_weights().iter().map(|l| l.exp()).collect();
        let d1: Vec<f64> = (0..n).map(|j| xc.state(j)[0] - y).collect();
        let mean: f64 = w.iter().zip(&d1).map(|(a, b)| a * b).sum();
        let var: f64 = w.iter().zip(&d1).map(|(a, b)| a * (b - mean).powi(2)).sum();
        let ess_x = 1.0 / w.iter().map(|a| a * a).sum::<f64>();
        let se = (var / ess_x).sqrt();
        let est = last.unwrap().filtered.unwrap().mean_d1[0];
        assert!((est - exact).abs() < 3.0 * se, "{est} vs {exact} (se {se})");
    }

    #[test]
    fn pf_likelihood_is_unbiased() {
        let (m, ds) = lgssm_data(30, 5);
        let params = m.params_at(0.5);
        let exact: f64 = kalman_predictives(&params, &ds.values)
            .unwrap()
            .iter()
            .zip(&ds.values)
            .map(|(p, &y)| p.log_pdf(y))
            .sum();
        let ratios: Vec<f64> = (0..50)
            .map(|s| {
                let xc = run_pf(&m, &[0.5], &ds, ds.len(), 256, &mut stream(s, &[tag::PF])).unwrap();
                (xc.loglik() - exact).exp()
            })
            .collect();
        let (mean, se) = mean_se(&ratios);
        assert!((mean - 1.0).abs() < 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn single_fixed_theta_matches_kalman_increment() {
        let (m, ds) = lgssm_data(8, 6);
        let params = m.params_at(0.5);
        let pred = kalman_predictive(&params, &ds.values[..7]).unwrap();
        let exact = hyvarinen_point(&pred.derivs(ds.values[7])).unwrap();
        let incs: Vec<f64> = (0..20)
            .map(|s| {
                let mut cloud = Smc2Cloud::from_thetas(&m, vec![0.5, 0.5], 2000).unwrap();
                let cfg = Smc2Config {
                    seed: s,
                    mh_steps: 0,
                    ..Default::default()
                };
                let mut last = 0.0;
                for t in 0..ds.len() {
                    let out = smc2_assimilate(&mut cloud, &ds, t, &m, &cfg, true).unwrap();
                    last = out.h_increment.unwrap().value;
                }
                last
            })
            .collect();
        let (mean, se) = mean_se(&incs);
        assert!((mean - exact).abs() < 3.0 * se.max(1e-3), "{mean} ± {se} vs {exact}");
    }

    #[test]
    fn flat_measurement_gives_zero_increment() {
        let m = LgssmModel::new(0.8, 0.5, 1e8, 4.0).unwrap();
        let ds = Dataset::univariate(vec![0.3, -0.2]);
        let mut cloud = Smc2Cloud::from_thetas(&m, vec![0.0, 1.0], 64).unwrap();
        let cfg = Smc2Config::default();
        for t in 0..2 {
            let out = smc2_assimilate(&mut cloud, &ds, t, &m, &cfg, true).unwrap();
            assert!(out.h_increment.unwrap().value.abs() < 1e-12);
        }
    }

    #[test]
    fn tower_property_is_exact() {
        let (m, ds) = lgssm_data(5, 7);
        let mut cloud = Smc2Cloud::from_thetas(&m, vec![-1.0, 0.0, 0.4, 2.0], 50).unwrap();
        let cfg = Smc2Config {
            mh_steps: 0,
            ess_threshold_ratio: 1e-9,
            ..Default::default()
        };
        for t in 0..4 {
            smc2_assimilate(&mut cloud, &ds, t, &m, &cfg, false).unwrap();
        }
        let out = smc2_assimilate(&mut cloud, &ds, 4, &m, &cfg, true).unwrap();
        let y = ds.row(4);
        let w = cloud.weights().unwrap();
        let mut jw = Vec::new();
        let mut jd: Vec<DensityDerivatives<f64>> = Vec::new();
        for (i, &wi) in w.iter().enumerate() {
            let xc = cloud.x_cloud(i);
            for j in 0..xc.len() {
                jw.push(wi * xc.log_weights()[j].exp());
                jd.push(m.measurement_y_derivs(y, xc.state(j), cloud.theta(i)).unwrap());
            }
        }
        let total: f64 = jw.iter().sum();
        jw.iter_mut().for_each(|v| *v /= total);
        let joint = hscore_increment_from_derivs(&jw, &jd).unwrap().value;
        let collapsed = out.h_increment.unwrap().value;
        assert!((joint - collapsed).abs() <= 1e-10 * joint.abs().max(1.0), "{joint} vs {collapsed}");
    }

    #[derive(Debug)]
    struct PointMass(f64);

    impl Proposal for PointMass {
        fn dim(&self) -> usize {
            1
        }
        fn sample(&self, _rng: &mut dyn rand::RngCore) -> Vec<f64> {
            vec![self.0]
        }
        fn log_density(&self, _x: &[f64]) -> f64 {
            0.0
        }
    }

    #[test]
    fn pmmh_with_point_proposal_accepts_everything() {
        // deterministic latent path: every filter returns the same estimate
        let m = LgssmModel::new(0.8, 1e-300, 1.0, 4.0).unwrap().with_init_var(1e-300).unwrap();
        let ds = Dataset::univariate(vec![0.2, -0.1, 0.4, 0.0, 0.3]);
        let cfg = Smc2Config {
            mh_steps: 0,
            ..Default::default()
        };
        let mut cloud = Smc2Cloud::from_thetas(&m, vec![0.3; 4], 8).unwrap();
        for t in 0..5 {
            smc2_assimilate(&mut cloud, &ds, t, &m, &cfg, false).unwrap();
        }
        let rate = pmmh_moves(&mut cloud, &ds, &m, &PointMass(0.3), 5, 9).unwrap();
        assert_eq!(rate, 1.0);
    }

    #[test]
    fn low_acceptance_doubles_nx() {
        let (m, ds) = lgssm_data(6, 9);
        let cfg = Smc2Config {
            n_theta: 8,
            n_x_init: 16,
            mh_steps: 0,
            ..Default::default()
        };
        let mut cloud = Smc2Cloud::from_prior(&m, &cfg).unwrap();
        for t in 0..6 {
            smc2_assimilate(&mut cloud, &ds, t, &m, &cfg, false).unwrap();
        }
        let lw = cloud.log_weights().to_vec();
        assert!(!adapt_nx(&mut cloud, 0.9, &ds, &m, &cfg).unwrap());
        assert_eq!(cloud.n_x(), 16);
        assert!(adapt_nx(&mut cloud, 0.01, &ds, &m, &cfg).unwrap());
        assert_eq!(cloud.n_x(), 32);
        assert!((0..8).all(|i| cloud.x_cloud(i).len() == 32));
        assert_eq!(cloud.log_weights(), &lw[..]);
        let capped = Smc2Config { n_x_max: 32, ..cfg };
        assert!(!adapt_nx(&mut cloud, 0.01, &ds, &m, &capped).unwrap());
    }

    #[test]
    fn single_particle_discrete_score_is_the_nb_score() {
        let m = KangarooModel::new(KangarooVariant::RandomWalk, 0.01).unwrap();
        let theta = [0.3, 0.2];
        let x = 150.0;
        let mut cloud = Smc2Cloud::from_thetas(&m, theta.to_vec(), 1).unwrap();
        cloud.x_clouds[0] = XCloud::from_states(1, vec![x]).unwrap();
        let y = [140.0, 160.0];
        let inc = discrete_hscore_increment_smc2(&cloud, &y, 1e-300, &m, 3).unwrap();
        // a negligible gap leaves x unchanged up to rounding
        let lp = |z: &[i64]| nb_log_pmf(z[0], x, theta[1]) + nb_log_pmf(z[1], x, theta[1]);
        let exact: f64 = discrete_hscore(&[140, 160], lp, &DiscreteSupport::counts(2)).unwrap();
        assert!((inc - exact).abs() < 1e-9 * exact.abs().max(1.0), "{inc} vs {exact}");
    }

    #[test]
    fn two_particle_pmf_matches_enumeration() {
        let m = KangarooModel::new(KangarooVariant::RandomWalk, 0.01).unwrap();
        let theta = [0.3, 0.5];
        let xs = [3.0, 8.0];
        let xc = XCloud::from_states(1, xs.to_vec()).unwrap();
        let y = [1i64, 4];
        let probes = DiscreteSupport::counts(2).probe_points(&y);
        let got = xc.predictive_log_pmf(&m, &theta, &y, &probes);
        for (z, lp) in probes.iter().zip(&got) {
            let direct: f64 = xs
                .iter()
                .map(|&x| 0.5 * (nb_log_pmf(z[0], x, theta[1]) + nb_log_pmf(z[1], x, theta[1])).exp())
                .sum();
            assert!((lp.exp() - direct).abs() < 1e-14, "{z:?}");
        }
        // boundary: y = 0 has no negative probes
        assert!(DiscreteSupport::counts(2).probe_points(&[0, 0]).iter().all(|z| z.iter().all(|&v| v >= 0)));
    }

    #[test]
    fn zero_count_uses_the_boundary_rule() {
        let m = KangarooModel::new(KangarooVariant::RandomWalk, 0.01).unwrap();
        let mut cloud = Smc2Cloud::from_thetas(&m, vec![0.3, 0.5], 1).unwrap();
        cloud.x_clouds[0] = XCloud::from_states(1, vec![2.0]).unwrap();
        let inc = discrete_hscore_increment_smc2(&cloud, &[0.0, 3.0], 1e-300, &m, 1).unwrap();
        assert!(inc.is_finite());
    }

    #[test]
    fn runs_are_deterministic() {
        let (m, ds) = lgssm_data(15, 10);
        let cfg = Smc2Config {
            n_theta: 64,
            n_x_init: 16,
            seed: 3,
            ..Default::default()
        };
        let a = run_smc2(&m, &ds, &cfg).unwrap();
        let b = run_smc2(&m, &ds, &cfg).unwrap();
        assert_eq!(a, b);
        let kde_cfg = Smc2Config {
            hscore_mode: HscoreMode::Kde,
            kde_draws: 64,
            ..cfg
        };
        assert_eq!(run_smc2(&m, &ds, &kde_cfg).unwrap(), run_smc2(&m, &ds, &kde_cfg).unwrap());
    }

    #[test]
    fn rejuvenation_targets_the_posterior() {
        // 1-D quadrature of prior × Kalman likelihood over the level
        let (m, ds) = lgssm_data(20, 11);
        let grid: Vec<f64> = (0..4001).map(|k| -6.0 + 12.0 * k as f64 / 4000.0).collect();
        let logpost: Vec<f64> = grid
            .iter()
            .map(|&mu| {
                let p: LgssmParams<f64> = m.params_at(mu);
                let ll: f64 = kalman_predictives(&p, &ds.values)
                    .unwrap()
                    .iter()
                    .zip(&ds.values)
                    .map(|(q, &y)| q.log_pdf(y))
                    .sum();
                ll - 0.5 * mu * mu / 4.0
            })
            .collect();
        let (w, _) = normalize(&logpost).unwrap();
        let mean: f64 = w.iter().zip(&grid).map(|(a, b)| a * b).sum();
        let var: f64 = w.iter().zip(&grid).map(|(a, b)| a * (b - mean).powi(2)).sum();

        let cfg = Smc2Config {
            n_theta: 512,
            n_x_init: 64,
            seed: 12,
            ..Default::default()
        };
        let mut cloud = Smc2Cloud::from_prior(&m, &cfg).unwrap();
        for t in 0..ds.len() {
            smc2_assimilate(&mut cloud, &ds, t, &m, &cfg, false).unwrap();
        }
        let rate = pmmh_rejuvenate(&mut cloud, &ds, &m, &cfg).unwrap();
        assert!(rate > 0.0 && rate <= 1.0);
        let th = cloud.thetas();
        let (em, se) = mean_se(th);
        assert!((em - mean).abs() < 3.0 * se * 2.0, "{em} vs {mean} (se {se})");
        let sq: Vec<f64> = th.iter().map(|v| (v - mean).powi(2)).collect();
        let (ev, sev) = mean_se(&sq);
        assert!((ev - var).abs() < 3.0 * sev * 2.0, "{ev} vs {var} (se {sev})");
    }
}
