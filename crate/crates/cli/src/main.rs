//! `hscore`: run H-score model comparison studies from config files.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use hscore::experiments::{
    replicate_iid, replicate_ssm, run_kangaroo_study, run_normal_cases, run_normal_study_on, run_phase_plane,
    run_sv_study, run_sv_study_on, StudyError, StudyOutcome, StudyResult,
};
use hscore::models::{model_by_id, simulate_iid, simulate_ssm, AnyModel, Dataset, ZooOptions};
use hscore::rng::{stream, tag};
use log::info;
use sha2::{Digest, Sha256};

use crate::config::{DataSource, ExperimentConfig, Permutation, Plan, Resolved};

const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
/// Worker threads for the samplers; unset means one per core.
const THREADS_ENV: &str = "HSCORE_THREADS";

#[derive(Parser)]
#[command(name = "hscore", version, about = "Prequential H-score and log-evidence for model comparison")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the study described by a config file.
    Run { config: PathBuf },
    /// Simulate a dataset from a model of the zoo.
    Simulate {
        model: String,
        /// Comma-separated parameter values.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        theta: Vec<f64>,
        /// Number of observations.
        #[arg(long = "T")]
        t_len: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a config file and print the resolved settings.
    Validate { config: PathBuf },
}

/// Failure classes, mapped to exit codes.
enum Failure {
    /// Bad config, bad arguments or unreadable data.
    Input(anyhow::Error),
    /// The sampler degenerated; partial output was written.
    Degenerate(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Degenerate(_) => 3,
            Failure::Runtime(_) => 1,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Input(e) | Failure::Degenerate(e) | Failure::Runtime(e) => e,
        }
    }
}

fn input<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Input(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Run { config } => cmd_run(&config),
        Command::Simulate {
            model,
            theta,
            t_len,
            seed,
            out,
        } => cmd_simulate(&model, &theta, t_len, seed, &out),
        Command::Validate { config } => cmd_validate(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

struct Loaded {
    resolved: Resolved,
    hash: String,
}

fn load(path: &Path) -> Result<Loaded, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(input)?;
    let hash: String = Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    let cfg = ExperimentConfig::parse(&text)
        .with_context(|| format!("invalid config {}", path.display()))
        .map_err(input)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolved = cfg
        .resolve(base)
        .with_context(|| format!("invalid config {}", path.display()))
        .map_err(input)?;
    Ok(Loaded { resolved, hash })
}

fn read_data(path: &Path) -> Result<Dataset, Failure> {
    if !path.exists() {
        return Err(input(anyhow::anyhow!("data file {} does not exist", path.display())));
    }
    Dataset::read_csv(path)
        .with_context(|| format!("cannot read data file {}", path.display()))
        .map_err(input)
}

fn plan_data_path(plan: &Plan) -> Option<&Path> {
    match plan {
        Plan::Normal { data, .. } | Plan::LevySv { data, .. } | Plan::Kangaroo { data, .. } => data.as_deref(),
        Plan::Single {
            source: DataSource::File(p),
            ..
        } => Some(p),
        _ => None,
    }
}

fn cmd_validate(path: &Path) -> Result<(), Failure> {
    let loaded = load(path)?;
    if let Some(p) = plan_data_path(&loaded.resolved.plan) {
        read_data(p)?;
    }
    let json = serde_json::to_string_pretty(&loaded.resolved).map_err(runtime)?;
    println!("{json}");
    Ok(())
}

fn metadata(loaded: &Loaded, study: &str) -> Vec<String> {
    vec![
        format!("study = {study}"),
        format!("config_sha256 = {}", loaded.hash),
        format!("seed = {}", loaded.resolved.seed),
        format!("reproducible = {}", loaded.resolved.reproducible),
        format!("version = {VERSION}"),
    ]
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("cannot create {}", path.display()))
        .map_err(runtime)
}

fn write_study(result: &StudyResult, dir: &Path, meta: &[String]) -> Result<(), Failure> {
    let csv_path = dir.join(format!("{}.csv", result.study));
    let mut out = create(&csv_path)?;
    result.write_csv(&mut out, meta).map_err(runtime)?;
    out.flush().map_err(runtime)?;

    let json_path = dir.join(format!("{}.summary.json", result.study));
    let mut out = create(&json_path)?;
    let doc = serde_json::json!({ "metadata": meta, "summary": result.summary });
    serde_json::to_writer_pretty(&mut out, &doc).map_err(runtime)?;
    writeln!(out).map_err(runtime)?;
    out.flush().map_err(runtime)?;
    info!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

fn cmd_run(path: &Path) -> Result<(), Failure> {
    let loaded = load(path)?;
    let dir = &loaded.resolved.output_dir;
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
        .map_err(runtime)?;

    let outcome: StudyOutcome<StudyResult> = match &loaded.resolved.plan {
        Plan::Normal { case, data, config } => match data {
            Some(p) => run_normal_study_on(*case, &read_data(p)?, config),
            None => run_normal_cases(*case, config),
        },
        Plan::PhasePlane(grid) => {
            let cells = run_phase_plane(grid).map_err(input)?;
            let mut out = create(&dir.join("phase-plane.csv"))?;
            for m in metadata(&loaded, "phase-plane") {
                writeln!(out, "# {m}").map_err(runtime)?;
            }
            writeln!(out, "mu,sigma2,fisher_gap,kl_gap,disagree").map_err(runtime)?;
            for c in cells {
                writeln!(out, "{:?},{:?},{:?},{:?},{}", c.mu, c.sigma2, c.fisher_gap, c.kl_gap, c.disagree)
                    .map_err(runtime)?;
            }
            return out.flush().map_err(runtime);
        }
        Plan::LevySv { data, config } => match data {
            Some(p) => run_sv_study_on(&read_data(p)?, config),
            None => run_sv_study(config),
        },
        Plan::Kangaroo { data, config } => {
            let ds = match data {
                Some(p) => read_data(p)?,
                None => Dataset::kangaroo_counts(),
            };
            run_kangaroo_study(&ds, config)
        }
        Plan::Single {
            model,
            zoo,
            source,
            replications,
            permutation,
            smc,
            smc2,
            seed,
        } => {
            let m = model_by_id(model, zoo).map_err(input)?;
            let ds = match source {
                DataSource::File(p) => read_data(p)?,
                DataSource::Simulated(s) => simulate(&m, &s.theta, s.t_len, *seed).map_err(input)?,
            };
            if ds.is_empty() {
                return Err(input(anyhow::anyhow!("dataset has no observations")));
            }
            let runs = match &m {
                AnyModel::Iid(m) => {
                    replicate_iid(m.as_ref(), &ds, smc, *replications, *permutation == Permutation::Random, *seed)
                }
                AnyModel::Ssm(m) => replicate_ssm(m.as_ref(), &ds, smc2, *replications, *seed),
            };
            runs.map(|r| StudyResult::new(model.clone(), r))
        }
    };
    match outcome {
        Ok(result) => {
            let meta = metadata(&loaded, &result.study);
            write_study(&result, dir, &meta)
        }
        Err(StudyError { source, partial }) => {
            let degenerate = matches!(source, hscore::Error::Degenerate(_));
            let has_rows = partial.runs.iter().any(|r| !r.trace.is_empty());
            if degenerate || has_rows {
                let mut meta = metadata(&loaded, &partial.study);
                meta.push(format!("incomplete = {source}"));
                write_study(&partial, dir, &meta)?;
            }
            let err = anyhow::Error::new(source);
            Err(if degenerate {
                Failure::Degenerate(err.context("sampler degenerated; the trace so far was written"))
            } else if err.downcast_ref::<hscore::Error>().is_some_and(is_input_error) {
                Failure::Input(err)
            } else {
                Failure::Runtime(err)
            })
        }
    }
}

fn is_input_error(e: &hscore::Error) -> bool {
    matches!(e, hscore::Error::InvalidInput(_) | hscore::Error::Dataset(_))
}

fn simulate(model: &AnyModel, theta: &[f64], t_len: usize, seed: u64) -> hscore::Result<Dataset> {
    let mut rng = stream(seed, &[tag::DATA]);
    match model {
        AnyModel::Iid(m) => simulate_iid(m.as_ref(), theta, t_len, &mut rng),
        AnyModel::Ssm(m) => {
            let times: Vec<f64> = (1..=t_len).map(|t| t as f64).collect();
            simulate_ssm(m.as_ref(), theta, &times, &mut rng)
        }
    }
}

fn cmd_simulate(model: &str, theta: &[f64], t_len: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let m = model_by_id(model, &ZooOptions::default()).map_err(input)?;
    let ds = simulate(&m, theta, t_len, seed).map_err(input)?;
    let theta_text: Vec<String> = theta.iter().map(|v| format!("{v:?}")).collect();
    let meta = vec![
        format!("model = {model}"),
        format!("theta = {}", theta_text.join(",")),
        format!("seed = {seed}"),
        format!("version = {VERSION}"),
    ];
    let mut w = create(out)?;
    ds.write_csv(&mut w, &meta).map_err(runtime)?;
    w.flush().map_err(runtime)
}
