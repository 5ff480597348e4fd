//! Model interfaces and the model zoo.
//!
//! [`IidModel`] covers models with a tractable likelihood for conditionally
//! i.i.d. observations; [`SsmModel`] covers state-space models that can only
//! be simulated forward and whose measurement density can be evaluated.
//! All draws take an explicit [`StreamRng`] so particle streams stay
//! reproducible under parallel execution.

mod dataset;
mod kangaroo;
mod levy_sv;
mod lgssm;
mod normal;

pub use dataset::{simulate_iid, simulate_ssm, Dataset};
pub use kangaroo::{nb_log_pmf, nb_sample, KangarooModel, KangarooVariant, STATE_FLOOR};
pub use levy_sv::{levy_sv_step_with_jumps, levy_sv_transition, LevySvModel, LevySvVariant};
pub use lgssm::LgssmModel;
pub use normal::{InvChiSquared, NormalLocation, NormalScale};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::StreamRng;
use crate::scoring::{DensityDerivatives, DiscreteSupport};

/// Parameter values with labels for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub names: Vec<String>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, names: Vec<String>) -> Result<Self> {
        if values.len() != names.len() {
            return Err(invalid(format!(
                "{} values for {} parameter names",
                values.len(),
                names.len()
            )));
        }
        Ok(Self { values, names })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Whether observations are continuous or integer-valued.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservationKind {
    Continuous,
    Discrete(DiscreteSupport),
}

/// Conditionally i.i.d. model `y_t | θ ~ p(y | θ)` with prior `p(θ)`.
pub trait IidModel: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &str;
    fn param_names(&self) -> Vec<String>;
    fn dim_theta(&self) -> usize;
    fn dim_y(&self) -> usize {
        1
    }
    /// Possibly unnormalized; `-∞` outside the support.
    fn prior_log_density(&self, theta: &[f64]) -> f64;
    /// `None` when the prior cannot be sampled (improper).
    fn sample_prior(&self, rng: &mut StreamRng) -> Option<Vec<f64>>;
    fn log_likelihood(&self, y: &[f64], theta: &[f64]) -> f64;
    fn likelihood_y_derivs(&self, y: &[f64], theta: &[f64]) -> DensityDerivatives<f64>;
    /// First `t` such that `p(θ | y_{1:t})` is proper (0 for a proper prior).
    fn first_proper_index(&self) -> usize {
        0
    }
    fn sample_observation(&self, theta: &[f64], rng: &mut StreamRng) -> Vec<f64>;
}

/// State-space model: `x_1 ~ μ_θ`, `x_{t+1} ~ f_θ(· | x_t)`, `y_t ~ g_θ(· | x_t)`.
pub trait SsmModel: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &str;
    fn param_names(&self) -> Vec<String>;
    fn dim_theta(&self) -> usize;
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;
    fn prior_log_density(&self, theta: &[f64]) -> f64;
    fn sample_prior(&self, rng: &mut StreamRng) -> Option<Vec<f64>>;
    /// Writes a draw of `x_1` into `x`.
    fn sample_initial(&self, theta: &[f64], x: &mut [f64], rng: &mut StreamRng);
    /// Advances `x` in place across an observation gap `dt`.
    fn transition(&self, theta: &[f64], x: &mut [f64], dt: f64, rng: &mut StreamRng);
    fn measurement_log_density(&self, y: &[f64], x: &[f64], theta: &[f64]) -> f64;
    /// y-derivatives of `log g_θ(y | x)`, when the measurement is continuous
    /// and differentiable.
    fn measurement_y_derivs(&self, y: &[f64], x: &[f64], theta: &[f64]) -> Option<DensityDerivatives<f64>>;
    fn sample_measurement(&self, x: &[f64], theta: &[f64], rng: &mut StreamRng) -> Option<Vec<f64>>;
    fn observation_kind(&self) -> ObservationKind;
    /// Log-pmf of one coordinate given `x`, for measurements whose coordinates
    /// are conditionally independent and discrete. Enables the cheap probe
    /// evaluation of the discrete score.
    fn measurement_coord_log_pmf(&self, _k: usize, _value: i64, _x: &[f64], _theta: &[f64]) -> Option<f64> {
        None
    }
}

/// A model from the zoo, of either kind.
#[derive(Debug)]
pub enum AnyModel {
    Iid(Box<dyn IidModel>),
    Ssm(Box<dyn SsmModel>),
}

impl AnyModel {
    pub fn name(&self) -> &str {
        match self {
            AnyModel::Iid(m) => m.name(),
            AnyModel::Ssm(m) => m.name(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            AnyModel::Iid(m) => m.param_names(),
            AnyModel::Ssm(m) => m.param_names(),
        }
    }

    pub fn dim_y(&self) -> usize {
        match self {
            AnyModel::Iid(m) => m.dim_y(),
            AnyModel::Ssm(m) => m.dim_y(),
        }
    }
}

/// Model identifiers accepted by [`model_by_id`].
pub const MODEL_IDS: &[&str] = &[
    "normal-m1",
    "normal-m1-flat",
    "normal-m2",
    "lgssm",
    "sv-m1",
    "sv-m2",
    "kangaroo-m1",
    "kangaroo-m2",
    "kangaroo-m2-wide",
    "kangaroo-m3",
];

/// Tunable hyperparameters of the zoo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZooOptions {
    pub sigma0_sq: f64,
    pub nu0: f64,
    pub s0_sq: f64,
    pub lgssm_phi: f64,
    pub lgssm_sigma_x: f64,
    pub lgssm_sigma_y: f64,
    pub lgssm_prior_var: f64,
    pub kangaroo_delta_t: f64,
}

impl Default for ZooOptions {
    fn default() -> Self {
        Self {
            sigma0_sq: 10.0,
            nu0: 0.1,
            s0_sq: 1.0,
            lgssm_phi: 0.8,
            lgssm_sigma_x: 0.5,
            lgssm_sigma_y: 1.0,
            lgssm_prior_var: 4.0,
            kangaroo_delta_t: 0.001,
        }
    }
}

/// Builds a zoo model from its identifier.
pub fn model_by_id(id: &str, opts: &ZooOptions) -> Result<AnyModel> {
    Ok(match id {
        "normal-m1" => AnyModel::Iid(Box::new(NormalLocation::new(opts.sigma0_sq)?)),
        "normal-m1-flat" => AnyModel::Iid(Box::new(NormalLocation::flat())),
        "normal-m2" => AnyModel::Iid(Box::new(NormalScale::new(opts.nu0, opts.s0_sq)?)),
        "lgssm" => AnyModel::Ssm(Box::new(LgssmModel::new(
            opts.lgssm_phi,
            opts.lgssm_sigma_x,
            opts.lgssm_sigma_y,
            opts.lgssm_prior_var,
        )?)),
        "sv-m1" => AnyModel::Ssm(Box::new(LevySvModel::new(LevySvVariant::OneFactor))),
        "sv-m2" => AnyModel::Ssm(Box::new(LevySvModel::new(LevySvVariant::TwoFactor))),
        "kangaroo-m1" => AnyModel::Ssm(Box::new(KangarooModel::new(KangarooVariant::Logistic, opts.kangaroo_delta_t)?)),
        "kangaroo-m2" => AnyModel::Ssm(Box::new(KangarooModel::new(KangarooVariant::Exponential, opts.kangaroo_delta_t)?)),
        "kangaroo-m2-wide" => AnyModel::Ssm(Box::new(
            KangarooModel::new(KangarooVariant::Exponential, opts.kangaroo_delta_t)?.with_growth_bound(100.0)?,
        )),
        "kangaroo-m3" => AnyModel::Ssm(Box::new(KangarooModel::new(KangarooVariant::RandomWalk, opts.kangaroo_delta_t)?)),
        other => {
            return Err(invalid(format!(
                "unknown model id `{other}` (known: {})",
                MODEL_IDS.join(", ")
            )))
        }
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    use crate::scoring::DensityDerivatives;

    /// Checks analytic y-derivatives against centered finite differences
    /// (step `1e-4`): gradient within `1e-5` and Laplacian within `1e-4`
    /// relative (absolute floor for values near zero).
    pub fn check_fd<F: Fn(&[f64]) -> f64>(f: F, y: &[f64], d: &DensityDerivatives<f64>) {
        let h = 1e-4;
        let f0 = f(y);
        assert!((f0 - d.log_density).abs() <= 1e-12 * f0.abs().max(1.0));
        let mut lap = 0.0;
        for k in 0..y.len() {
            let mut yp = y.to_vec();
            let mut ym = y.to_vec();
            yp[k] += h;
            ym[k] -= h;
            let (fp, fm) = (f(&yp), f(&ym));
            let g = (fp - fm) / (2.0 * h);
            let scale = d.grad_log[k].abs().max(1.0);
            assert!((g - d.grad_log[k]).abs() <= 1e-5 * scale, "grad {g} vs {}", d.grad_log[k]);
            lap += (fp - 2.0 * f0 + fm) / (h * h);
        }
        let scale = d.lap_log.abs().max(1.0);
        assert!((lap - d.lap_log).abs() <= 1e-4 * scale, "lap {lap} vs {}", d.lap_log);
    }
}
