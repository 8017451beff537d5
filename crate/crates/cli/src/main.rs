//! `abcei` — run ABCEI and baseline experiments from a JSON config.
//!
//! Exit codes: 0 success, 1 other failure, 2 config error, 3 data error,
//! 4 every replication failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abcei::data::{split, write_csv, SplitSpec};
use abcei::eval::{evaluate, SplitTag};
use abcei::experiment::{
    csv_header_lines, load_dataset, run_experiment, sweep_bias, trace_mi, write_json, write_sweep_csv,
    write_trace_mi_csv, DatasetSource, ExperimentConfig, ExperimentError, SweepAxis, Variant,
};
use abcei::model::{ablate, write_trace_csv, AbceiModel, ModelCheckpoint, ModelError};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "abcei", version, about = "Adversarial balancing CATE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's variant.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset of one seed as `data_{seed}.csv`.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one ABCEI model; writes `model_{seed}.json` and `trace_{seed}.csv`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a trained checkpoint on the splits of its seed; writes `eval_{seed}.json`.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint written by `train`.
        #[arg(long)]
        model: PathBuf,
    },
    /// Run all replications; writes `rep_{seed}.json` and `aggregate.json`.
    Replicate {
        #[command(flatten)]
        common: Common,
        /// Overrides the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Sweep treatment-selection bias on the toy generator; writes `sweep_bias.csv`.
    SweepBias {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Group KL targets, comma separated.
        #[arg(long, value_delimiter = ',', conflicts_with = "offsets")]
        kl: Vec<f64>,
        /// Raw mean offsets, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        offsets: Vec<f64>,
        /// Methods to compare, comma separated; defaults to the config's variant.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
    /// Per-epoch MI estimate and validation PEHE without the adversarial
    /// component; writes `trace_mi.csv`.
    TraceMi {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
enum CliError {
    Experiment(ExperimentError),
    Checkpoint(String),
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        CliError::Experiment(e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Experiment(e.into())
    }
}

impl From<abcei::data::DataError> for CliError {
    fn from(e: abcei::data::DataError) -> Self {
        CliError::Experiment(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Experiment(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Experiment(ExperimentError::Config(_)) | CliError::Checkpoint(_) => 2,
            CliError::Experiment(ExperimentError::Data(_)) => 3,
            CliError::Experiment(ExperimentError::AllFailed(_)) => 4,
            CliError::Experiment(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Experiment(e) => write!(f, "{e}"),
            CliError::Checkpoint(m) => write!(f, "checkpoint: {m}"),
        }
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Experiment(ExperimentError::Config(msg.into()))
}

/// Reads the config and applies command-line overrides. The returned
/// config is what every output file records.
fn load_config(common: &Common, base_seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| config_error(format!("{}: {e}", common.config.display())))?;
    let mut config: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", common.config.display())))?;
    if let Some(v) = &common.variant {
        config.variant = Variant::parse(v)?;
    }
    if let Some(s) = base_seed {
        config.base_seed = s;
    }
    if let Some(out) = &common.out {
        config.output_dir = Some(out.clone());
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(config: &ExperimentConfig) -> Result<&Path, CliError> {
    let dir = config
        .output_dir
        .as_deref()
        .ok_or_else(|| config_error("no output directory: pass --out or set output_dir"))?;
    fs::create_dir_all(dir)?;
    Ok(dir)
}

/// Writes `header` followed by the CSV body produced by `body`.
fn write_with_header(
    path: &Path,
    header: String,
    body: impl FnOnce(&mut Vec<u8>) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let mut buf = header.into_bytes();
    body(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    seed: u64,
    checkpoint: String,
    in_sample: abcei::eval::MetricsReport,
    out_sample: abcei::eval::MetricsReport,
    config: &'a ExperimentConfig,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common, seed } => {
            let config = load_config(&common, None)?;
            let dir = out_dir(&config)?;
            let ds = load_dataset(&config.dataset, seed)?;
            let path = dir.join(format!("data_{seed}.csv"));
            write_with_header(&path, csv_header_lines(&config, &[seed])?, |buf| {
                write_csv(&ds, buf).map_err(|e| CliError::Experiment(e.into()))
            })?;
            log::info!("wrote {} ({} units)", path.display(), ds.n());
        }
        Command::Train { common, seed } => {
            let config = load_config(&common, None)?;
            let Some(variant) = config.variant.abcei() else {
                return Err(config_error(format!("train needs an ABCEI variant, got {}", config.variant.name())));
            };
            let dir = out_dir(&config)?;
            let ds = load_dataset(&config.dataset, seed)?;
            let splits = split(&ds, &SplitSpec::new(seed))?;
            let mut mc = ablate(&config.model, variant);
            mc.seed = seed;
            let mut model = AbceiModel::new(mc, ds.k())?;
            let report = model.fit(&splits.train, &splits.val, |rec, _| {
                log::debug!("epoch {} val_mse {:.5}", rec.epoch, rec.val_mse);
            })?;
            write_json(&dir.join(format!("model_{seed}.json")), &model.to_checkpoint())?;
            write_with_header(
                &dir.join(format!("trace_{seed}.csv")),
                csv_header_lines(&config, &[seed])?,
                |buf| write_trace_csv(&report.trace, buf).map_err(|e| CliError::Experiment(ExperimentError::Output(e.to_string()))),
            )?;
            log::info!("best epoch {} of {}", report.best_epoch, report.trace.len());
        }
        Command::Evaluate { common, seed, model } => {
            let config = load_config(&common, None)?;
            let dir = out_dir(&config)?;
            let text = fs::read_to_string(&model).map_err(|e| CliError::Checkpoint(format!("{}: {e}", model.display())))?;
            let cp: ModelCheckpoint =
                serde_json::from_str(&text).map_err(|e| CliError::Checkpoint(format!("{}: {e}", model.display())))?;
            let m = AbceiModel::from_checkpoint(cp).map_err(|e| CliError::Checkpoint(e.to_string()))?;
            let ds = load_dataset(&config.dataset, seed)?;
            if ds.k() != m.input_dim() {
                return Err(CliError::Checkpoint(format!(
                    "model expects {} covariates, dataset has {}",
                    m.input_dim(),
                    ds.k()
                )));
            }
            let splits = split(&ds, &SplitSpec::new(seed))?;
            let in_ds = splits.in_sample();
            let att = match &config.dataset {
                DatasetSource::Csv { att_true, .. } => *att_true,
                _ => None,
            };
            let eval = |d: &abcei::data::Dataset, tag| -> Result<_, CliError> {
                let pred = m.predict_outcomes(d.x())?;
                evaluate(d, &pred, tag, att).map_err(|e| CliError::Experiment(e.into()))
            };
            let out = EvalOutput {
                seed,
                checkpoint: model.display().to_string(),
                in_sample: eval(&in_ds, SplitTag::In)?,
                out_sample: eval(&splits.test, SplitTag::Out)?,
                config: &config,
            };
            write_json(&dir.join(format!("eval_{seed}.json")), &out)?;
        }
        Command::Replicate { common, seed, jobs } => {
            let config = load_config(&common, seed)?;
            out_dir(&config)?;
            let outcome = run_experiment(&config, jobs.max(1))?;
            let agg = &outcome.aggregate;
            log::info!("{} of {} replications completed", agg.completed, agg.seeds.len());
        }
        Command::SweepBias {
            common,
            seed,
            jobs,
            kl,
            offsets,
            methods,
        } => {
            let config = load_config(&common, seed)?;
            let dir = out_dir(&config)?.to_path_buf();
            let axis = match (kl.is_empty(), offsets.is_empty()) {
                (false, true) => SweepAxis::KlTargets(kl),
                (true, false) => SweepAxis::Offsets(offsets),
                _ => return Err(config_error("sweep-bias needs exactly one of --kl or --offsets")),
            };
            let methods = if methods.is_empty() {
                vec![config.variant]
            } else {
                methods.iter().map(|m| Variant::parse(m)).collect::<Result<_, _>>()?
            };
            // per-cell files would collide across bias levels
            let quiet = ExperimentConfig {
                output_dir: None,
                ..config.clone()
            };
            let rows = sweep_bias(&quiet, &axis, &methods, jobs.max(1))?;
            let mut buf = Vec::new();
            write_sweep_csv(&config, &rows, &mut buf)?;
            fs::write(dir.join("sweep_bias.csv"), buf)?;
        }
        Command::TraceMi { common, seed } => {
            let mut config = load_config(&common, None)?;
            if common.variant.is_none() && config.variant != Variant::NoAdversarial {
                log::info!("trace-mi runs the no_adversarial variant");
                config.variant = Variant::NoAdversarial;
            }
            let dir = out_dir(&config)?.to_path_buf();
            let rows = trace_mi(&config, seed)?;
            let mut buf = Vec::new();
            write_trace_mi_csv(&config, seed, &rows, &mut buf)?;
            fs::write(dir.join("trace_mi.csv"), buf)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
