//! `nsc`: batch front end for neural state classification experiments.
//!
//! Every command reads an optional JSON experiment config, applies flag
//! overrides, writes its artifacts under the output directory and prints a
//! JSON summary. Failures print a JSON error object on stderr and exit
//! nonzero.

mod commands;
mod config;
mod plot;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "nsc", version, about = "Neural state classification for hybrid automata")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment config (JSON); flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model file or bundled model name (neuron, pendulum, quadcopter, ...).
    #[arg(long, global = true)]
    model: Option<String>,
    /// Master seed.
    #[arg(long, global = true, env = "NSC_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Sample and label a dataset.
    Generate(GenerateArgs),
    /// Train a classifier on a dataset.
    Train(TrainArgs),
    /// Accuracy, FN and FP rates with confidence intervals.
    Eval(EvalArgs),
    /// Sequential probability ratio test of accuracy or FN rate.
    Certify(CertifyArgs),
    /// Search for false negatives with the genetic falsifier.
    Falsify(FalsifyArgs),
    /// Falsification-guided adaptation of a network.
    Adapt(AdaptArgs),
    /// Rates over a grid of decision thresholds.
    SweepThreshold(SweepThresholdArgs),
    /// Test accuracy over a grid of network shapes.
    SweepArch(SweepArchArgs),
    /// Simulate one trajectory.
    Simulate(SimulateArgs),
    /// Forward-then-reverse round trips from random states.
    ReverseCheck(ReverseCheckArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Certify(_) => "certify",
            Command::Falsify(_) => "falsify",
            Command::Adapt(_) => "adapt",
            Command::SweepThreshold(_) => "sweep-threshold",
            Command::SweepArch(_) => "sweep-arch",
            Command::Simulate(_) => "simulate",
            Command::ReverseCheck(_) => "reverse-check",
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    /// uniform, balanced or dynamics-aware.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// Parameters drawn per sample from their ranges (comma separated).
    #[arg(long, value_delimiter = ',')]
    params: Option<Vec<String>>,
    /// Output CSV, relative to the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// dnn-s, dnn-r, snn, nbor or bdt.
    #[arg(long)]
    family: Option<String>,
    /// Decision threshold stored with the classifier.
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Threshold; defaults to the classifier's own.
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Property {
    /// P(correct) ≥ level.
    Accuracy,
    /// P(false negative) ≤ level.
    FnRate,
}

#[derive(Args, Debug, Serialize)]
pub struct CertifyArgs {
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long, value_enum, default_value_t = Property::Accuracy)]
    property: Property,
    /// Level tested; defaults to the config's SPRT level for the property.
    #[arg(long)]
    level: Option<f64>,
    /// Labeled samples consumed in order; fresh samples are drawn if absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Decision threshold; defaults to the classifier's own.
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct FalsifyArgs {
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct AdaptArgs {
    #[arg(long)]
    classifier: PathBuf,
    /// The dataset the classifier was trained on.
    #[arg(long)]
    train: PathBuf,
    /// Test set tracked per iteration.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct SweepThresholdArgs {
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    points: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArchArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    family: Option<String>,
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    neurons: Option<Vec<usize>>,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Deterministic,
    RandomWalk,
}

#[derive(Args, Debug, Serialize)]
pub struct SimulateArgs {
    /// Mode id; defaults to the first mode.
    #[arg(long)]
    mode: Option<String>,
    /// Initial values of the continuous variables (comma separated).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    x: Vec<f64>,
    /// Defaults to the model's time bound.
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long, value_enum, default_value_t = Policy::Deterministic)]
    policy: Policy,
    /// Run the reverse automaton instead.
    #[arg(long)]
    reverse: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct ReverseCheckArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long)]
    horizon: Option<f64>,
}

/// The effective run context handed to every command.
pub struct Run {
    pub command: &'static str,
    pub cfg: ExperimentConfig,
    pub hash: String,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn seed(&self) -> u64 {
        self.cfg.seed
    }

    /// Output path under the output directory.
    pub fn path(&self, given: Option<&Path>, default: &str) -> PathBuf {
        let p = given.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(default));
        if p.is_absolute() {
            p
        } else {
            self.cfg.out_dir.join(p)
        }
    }

    fn record(&mut self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    fn provenance(&self) -> String {
        format!("nsc {} config_hash={} seed={}", self.command, self.hash, self.seed())
    }

    /// Writes a JSON report carrying the provenance fields and the
    /// effective config.
    pub fn write_json(&mut self, path: &Path, body: Value) -> Result<()> {
        self.record(path)?;
        let mut doc = json!({
            "command": self.command,
            "config_hash": self.hash,
            "seed": self.seed(),
        });
        let obj = doc.as_object_mut().expect("object");
        match body {
            Value::Object(m) => obj.extend(m),
            other => {
                obj.insert("result".into(), other);
            }
        }
        obj.insert("config".into(), serde_json::to_value(&self.cfg)?);
        let text = serde_json::to_string_pretty(&doc)? + "\n";
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Writes CSV text behind a `#` provenance line.
    pub fn write_csv(&mut self, path: &Path, body: &str) -> Result<()> {
        self.record(path)?;
        let text = format!("# {}\n{body}", self.provenance());
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_svg(&mut self, path: &Path, svg: &str) -> Result<()> {
        self.record(path)?;
        let text = format!("<!-- {} -->\n{svg}", self.provenance());
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn setup(global: &Global, command: &Command) -> Result<Run> {
    let mut cfg = match &global.config {
        Some(p) => ExperimentConfig::load(config::existing(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = &global.model {
        cfg.model = Some(m.clone());
    }
    let seed = global.seed.unwrap_or(cfg.seed);
    cfg.set_seed(seed);
    if let Some(d) = &global.out_dir {
        cfg.out_dir = d.clone();
    }
    commands::apply_overrides(&mut cfg, command);
    cfg.validate()?;
    let args = serde_json::to_value(command)?;
    let hash = cfg.hash(command.name(), &args);
    Ok(Run {
        command: command.name(),
        cfg,
        hash,
        outputs: Vec::new(),
    })
}

fn run(cli: Cli) -> Result<()> {
    if let Some(j) = cli.global.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .context("starting the worker pool")?;
    }
    let mut r = setup(&cli.global, &cli.command)?;
    let summary = commands::dispatch(&mut r, &cli.command)?;
    let out = json!({
        "command": r.command,
        "config_hash": r.hash,
        "seed": r.seed(),
        "outputs": r.outputs,
        "summary": summary,
    });
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, &out)?;
    writeln!(stdout)?;
    Ok(())
}

/// Names the module an error came from.
fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if cause.is::<config::ConfigError>() {
            return "config";
        }
        if cause.is::<nsc_core::model::ModelError>() {
            return "model";
        }
        if cause.is::<nsc_core::sampling::SamplingError>() {
            return "sampling";
        }
        if cause.is::<nsc_core::classify::ClassifyError>() {
            return "classifier";
        }
        if cause.is::<nsc_core::eval::EvalError>() {
            return "evaluation";
        }
        if cause.is::<nsc_core::falsify::FalsifyError>() {
            return "falsification";
        }
        if cause.is::<nsc_core::sim::SimError>() {
            return "simulation";
        }
        if cause.is::<serde_json::Error>() {
            return "json";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "other"
}

fn report_error(command: Option<&str>, kind: &str, message: String) {
    let err = json!({ "error": { "command": command, "kind": kind, "message": message } });
    eprintln!("{}", serde_json::to_string_pretty(&err).expect("error serializes"));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report_error(None, "usage", e.to_string().trim_end().to_string());
            return ExitCode::from(2);
        }
    };
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(Some(name), error_kind(&e), format!("{e:#}"));
            ExitCode::from(1)
        }
    }
}
