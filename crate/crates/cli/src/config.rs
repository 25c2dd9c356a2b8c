use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nsc_core::classify::TrainConfig;
use nsc_core::falsify::{AdaptConfig, GaConfig};
use nsc_core::model::{self, HybridAutomaton};
use nsc_core::sampling::SamplingConfig;

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SprtConfig {
    /// Accuracy level tested by `certify --property accuracy`.
    pub theta_accuracy: f64,
    /// FN-rate level tested by `certify --property fn-rate`.
    pub theta_fn: f64,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub max_samples: usize,
    /// Fresh samples drawn per batch when no stream file is given.
    pub batch: usize,
}

impl Default for SprtConfig {
    fn default() -> Self {
        SprtConfig {
            theta_accuracy: 0.997,
            theta_fn: 0.002,
            delta: 0.001,
            alpha: 0.01,
            beta: 0.01,
            max_samples: 1_000_000,
            batch: 1_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub points: usize,
    pub layers: Vec<usize>,
    pub neurons: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            points: 100,
            layers: vec![1, 2, 3],
            neurons: vec![5, 10, 20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model file, or the name of a bundled model.
    pub model: Option<String>,
    /// Parameter values overriding the model defaults.
    pub parameters: BTreeMap<String, f64>,
    pub strategy: String,
    pub test_strategy: String,
    pub train_n: usize,
    pub test_n: usize,
    pub classifier: String,
    pub sampling: SamplingConfig,
    pub train: TrainConfig,
    pub theta: f64,
    pub confidence: f64,
    pub sprt: SprtConfig,
    pub ga: GaConfig,
    pub adapt: AdaptConfig,
    pub sweep: SweepConfig,
    /// Master seed; drives sampling, training and the falsifier.
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: None,
            parameters: BTreeMap::new(),
            strategy: "balanced".into(),
            test_strategy: "uniform".into(),
            train_n: 20_000,
            test_n: 10_000,
            classifier: "dnn-s".into(),
            sampling: SamplingConfig::default(),
            train: TrainConfig::default(),
            theta: 0.5,
            confidence: 0.99,
            sprt: SprtConfig::default(),
            ga: GaConfig::default(),
            adapt: AdaptConfig::default(),
            sweep: SweepConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))
            .map_err(Into::into)
    }

    /// Makes the master seed the seed of every stochastic stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.ga.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConfigError(m).into());
        if !(0.0..=1.0).contains(&self.theta) {
            return bad(format!("theta {} is outside [0, 1]", self.theta));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad(format!("confidence {} is outside (0, 1)", self.confidence));
        }
        if self.sprt.batch == 0 {
            return bad("sprt.batch must be positive".into());
        }
        if self.sweep.points == 0 {
            return bad("sweep.points must be positive".into());
        }
        Ok(())
    }

    pub fn model(&self) -> Result<HybridAutomaton> {
        let Some(name) = &self.model else {
            bail!(ConfigError("no model given (use --model or the config's `model`)".into()));
        };
        let mut ha = model::load_model(name).with_context(|| format!("loading model {name}"))?;
        for (k, v) in &self.parameters {
            ha.set_parameter(k, *v)?;
        }
        Ok(ha)
    }

    /// SHA-256 of the command, its arguments and the effective
    /// configuration.
    pub fn hash(&self, command: &str, args: &serde_json::Value) -> String {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(args.to_string().as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Checks that an input file exists before any work starts.
pub fn existing(path: &Path) -> Result<&Path> {
    if !path.is_file() {
        bail!(ConfigError(format!("input file {} does not exist", path.display())));
    }
    Ok(path)
}
