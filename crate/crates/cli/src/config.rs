//! Experiment configuration files.
//!
//! A config is one TOML document. Top-level keys pick the study and its
//! size; the optional `[smc]`, `[smc2]`, `[hyper]`, `[zoo]`, `[phase]` and
//! `[simulate]` tables override individual fields of the resolved defaults.
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use hscore::experiments::{KangarooStudyConfig, NormalStudyConfig, PhaseGrid, Scale, SvStudyConfig};
use hscore::models::{ZooOptions, MODEL_IDS};
use hscore::oracle::NormalHyper;
use hscore::smc::SmcConfig;
use hscore::smc2::Smc2Config;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    Normal,
    PhasePlane,
    LevySv,
    Kangaroo,
    /// One model from the zoo on a data file or a simulated series.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Permutation {
    Identity,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    pub theta: Vec<f64>,
    pub t_len: usize,
}

/// The file as written by the user.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub study: StudyKind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Runs are deterministic given the seed at any thread count; the flag
    /// is recorded in the output metadata.
    #[serde(default = "default_true")]
    pub reproducible: bool,
    pub scale: Option<Scale>,
    pub replications: Option<usize>,
    pub permutation: Option<Permutation>,
    pub case: Option<usize>,
    pub t_len: Option<usize>,
    pub model: Option<String>,
    pub data: Option<PathBuf>,
    pub delta_t: Option<f64>,
    pub wide_growth_bound: Option<f64>,
    pub simulate: Option<SimulateSpec>,
    pub smc: Option<toml::Table>,
    pub smc2: Option<toml::Table>,
    pub hyper: Option<toml::Table>,
    pub zoo: Option<toml::Table>,
    pub phase: Option<toml::Table>,
}

fn default_seed() -> u64 {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    File(PathBuf),
    Simulated(SimulateSpec),
}

/// Fully resolved settings of one study.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Plan {
    Normal {
        case: usize,
        data: Option<PathBuf>,
        config: NormalStudyConfig,
    },
    PhasePlane(PhaseGrid),
    LevySv {
        data: Option<PathBuf>,
        config: SvStudyConfig,
    },
    Kangaroo {
        data: Option<PathBuf>,
        config: KangarooStudyConfig,
    },
    Single {
        model: String,
        zoo: ZooOptions,
        source: DataSource,
        replications: usize,
        permutation: Permutation,
        smc: SmcConfig,
        smc2: Smc2Config,
        seed: u64,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub study: StudyKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub reproducible: bool,
    pub plan: Plan,
}

/// Overlays the keys of `table` on the serialized `base`.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, table: Option<&toml::Table>, section: &str) -> anyhow::Result<T> {
    let Some(table) = table else {
        return Ok(toml::Value::try_from(base)?.try_into()?);
    };
    let mut merged = match toml::Value::try_from(base)? {
        toml::Value::Table(t) => t,
        _ => bail!("[{section}] is not a table"),
    };
    for (k, v) in table {
        merged.insert(k.clone(), v.clone());
    }
    toml::Value::Table(merged)
        .try_into()
        .with_context(|| format!("invalid [{section}] section"))
}

fn unused(cfg: &ExperimentConfig, keys: &[(&str, bool)]) -> anyhow::Result<()> {
    for (k, present) in keys {
        if *present {
            bail!("key `{k}` does not apply to study {:?}", cfg.study);
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Resolves defaults and validates; relative paths are taken from `base_dir`.
    pub fn resolve(&self, base_dir: &Path) -> anyhow::Result<Resolved> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| base_dir.join(p));
        let output_dir = base_dir.join(&self.output_dir);
        let c = self;
        let plan = match self.study {
            StudyKind::Normal => {
                unused(c, &[
                    ("model", c.model.is_some()),
                    ("simulate", c.simulate.is_some()),
                    ("smc2", c.smc2.is_some()),
                    ("zoo", c.zoo.is_some()),
                    ("phase", c.phase.is_some()),
                    ("scale", c.scale.is_some()),
                    ("delta_t", c.delta_t.is_some()),
                    ("wide_growth_bound", c.wide_growth_bound.is_some()),
                ])?;
                let case = c.case.context("study \"normal\" needs `case` (1-4)")?;
                if !(1..=4).contains(&case) {
                    bail!("case must be 1..=4, got {case}");
                }
                let base = NormalStudyConfig::default();
                let smc: SmcConfig = overlay(&base.smc, c.smc.as_ref(), "smc")?;
                let config = NormalStudyConfig {
                    t_len: c.t_len.unwrap_or(base.t_len),
                    replications: c.replications.unwrap_or(base.replications),
                    n_theta: smc.n_theta,
                    permute: c.permutation.map(|p| p == Permutation::Random).unwrap_or(base.permute),
                    hyper: overlay(&NormalHyper::default(), c.hyper.as_ref(), "hyper")?,
                    smc: SmcConfig { seed: c.seed, ..smc },
                    seed: c.seed,
                };
                config.smc.validate()?;
                Plan::Normal {
                    case,
                    data: path(&c.data),
                    config,
                }
            }
            StudyKind::PhasePlane => {
                unused(c, &[
                    ("model", c.model.is_some()),
                    ("data", c.data.is_some()),
                    ("simulate", c.simulate.is_some()),
                    ("smc", c.smc.is_some()),
                    ("smc2", c.smc2.is_some()),
                    ("replications", c.replications.is_some()),
                ])?;
                Plan::PhasePlane(overlay(&PhaseGrid::default(), c.phase.as_ref(), "phase")?)
            }
            StudyKind::LevySv => {
                unused(c, &[
                    ("model", c.model.is_some()),
                    ("smc", c.smc.is_some()),
                    ("case", c.case.is_some()),
                    ("simulate", c.simulate.is_some()),
                ])?;
                let base = SvStudyConfig::at_scale(c.scale.unwrap_or(Scale::Desk));
                let smc2: Smc2Config = overlay(&base.smc2, c.smc2.as_ref(), "smc2")?;
                let config = SvStudyConfig {
                    t_len: c.t_len.unwrap_or(base.t_len),
                    replications: c.replications.unwrap_or(base.replications),
                    smc2: Smc2Config { seed: c.seed, ..smc2 },
                    seed: c.seed,
                };
                config.smc2.validate()?;
                Plan::LevySv {
                    data: path(&c.data),
                    config,
                }
            }
            StudyKind::Kangaroo => {
                unused(c, &[
                    ("model", c.model.is_some()),
                    ("smc", c.smc.is_some()),
                    ("case", c.case.is_some()),
                    ("t_len", c.t_len.is_some()),
                    ("simulate", c.simulate.is_some()),
                ])?;
                let base = KangarooStudyConfig::at_scale(c.scale.unwrap_or(Scale::Desk));
                let smc2: Smc2Config = overlay(&base.smc2, c.smc2.as_ref(), "smc2")?;
                let config = KangarooStudyConfig {
                    replications: c.replications.unwrap_or(base.replications),
                    delta_t: c.delta_t.unwrap_or(base.delta_t),
                    wide_growth_bound: c.wide_growth_bound.unwrap_or(base.wide_growth_bound),
                    smc2: Smc2Config { seed: c.seed, ..smc2 },
                    seed: c.seed,
                };
                config.smc2.validate()?;
                if !(config.delta_t > 0.0) || !(config.wide_growth_bound > 0.0) {
                    bail!("delta_t and wide_growth_bound must be positive");
                }
                Plan::Kangaroo {
                    data: path(&c.data),
                    config,
                }
            }
            StudyKind::Single => {
                unused(c, &[("case", c.case.is_some()), ("phase", c.phase.is_some()), ("scale", c.scale.is_some())])?;
                let model = c.model.clone().context("study \"single\" needs `model`")?;
                if !MODEL_IDS.contains(&model.as_str()) {
                    bail!("unknown model id {model:?}; known ids: {}", MODEL_IDS.join(", "));
                }
                let source = match (&c.data, &c.simulate) {
                    (Some(_), Some(_)) => bail!("give either `data` or [simulate], not both"),
                    (Some(_), None) => DataSource::File(path(&c.data).expect("checked")),
                    (None, Some(s)) => DataSource::Simulated(s.clone()),
                    (None, None) => bail!("study \"single\" needs `data` or a [simulate] table"),
                };
                if c.t_len.is_some() {
                    bail!("use [simulate] t_len for simulated data");
                }
                let mut zoo: ZooOptions = overlay(&ZooOptions::default(), c.zoo.as_ref(), "zoo")?;
                if let Some(dt) = c.delta_t {
                    zoo.kangaroo_delta_t = dt;
                }
                let smc: SmcConfig = overlay(&SmcConfig::default(), c.smc.as_ref(), "smc")?;
                let smc2: Smc2Config = overlay(&Smc2Config::default(), c.smc2.as_ref(), "smc2")?;
                smc.validate()?;
                smc2.validate()?;
                hscore::models::model_by_id(&model, &zoo)?;
                Plan::Single {
                    model,
                    zoo,
                    source,
                    replications: c.replications.unwrap_or(1),
                    permutation: c.permutation.unwrap_or(Permutation::Identity),
                    smc: SmcConfig { seed: c.seed, ..smc },
                    smc2: Smc2Config { seed: c.seed, ..smc2 },
                    seed: c.seed,
                }
            }
        };
        if self.replications == Some(0) {
            bail!("replications must be positive");
        }
        Ok(Resolved {
            study: self.study,
            seed: self.seed,
            output_dir,
            reproducible: self.reproducible,
            plan,
        })
    }
}
