//! State classifiers: neural networks (DNN-S, DNN-R, SNN) trained with
//! Levenberg–Marquardt, and the nearest-neighbor and decision-tree
//! baselines. Trainers are registered by name.

pub mod bdt;
pub mod mlp;
pub mod nbor;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HybridAutomaton, State};
use crate::sampling::SampleSet;

pub use bdt::Bdt;
pub use mlp::{Activation, Arch, LmConfig, Mlp, StopReason, TrainReport};
pub use nbor::Nbor;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training set is empty")]
    Empty,
    #[error("unknown classifier '{0}'")]
    Unknown(String),
    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeEncoding {
    /// Mode index as one normalized input (omitted for single-mode models).
    #[default]
    Scalar,
    /// One input per mode.
    OneHot,
}

/// Maps a state to the classifier's raw input vector: mode encoding, then
/// continuous variables, then the selected parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Features {
    pub n_modes: usize,
    pub encoding: ModeEncoding,
    pub dim: usize,
    /// Parameter indices fed to the network.
    pub params: Vec<usize>,
}

impl Features {
    pub fn new(ha: &HybridAutomaton, params: Vec<usize>, encoding: ModeEncoding) -> Features {
        Features {
            n_modes: ha.modes.len(),
            encoding,
            dim: ha.dim(),
            params,
        }
    }

    pub fn mode_inputs(&self) -> usize {
        match (self.n_modes, self.encoding) {
            (1, _) => 0,
            (_, ModeEncoding::Scalar) => 1,
            (m, ModeEncoding::OneHot) => m,
        }
    }

    pub fn len(&self) -> usize {
        self.mode_inputs() + self.dim + self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn extract(&self, s: &State) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        match (self.n_modes, self.encoding) {
            (1, _) => {}
            (_, ModeEncoding::Scalar) => v.push(s.mode as f64),
            (m, ModeEncoding::OneHot) => v.extend((0..m).map(|k| if k == s.mode { 1.0 } else { 0.0 })),
        }
        v.extend_from_slice(&s.x);
        v.extend(self.params.iter().map(|&k| s.p[k]));
        v
    }

    /// Box of raw inputs: mode range, the hull of the sampling domains and
    /// the parameter ranges.
    pub fn input_box(&self, ha: &HybridAutomaton) -> Vec<(f64, f64)> {
        let mut b = Vec::with_capacity(self.len());
        match (self.n_modes, self.encoding) {
            (1, _) => {}
            (m, ModeEncoding::Scalar) => b.push((0.0, (m - 1) as f64)),
            (m, ModeEncoding::OneHot) => b.extend(std::iter::repeat_n((0.0, 1.0), m)),
        }
        b.extend(ha.domain_hull().0);
        b.extend(self.params.iter().map(|&k| ha.parameters[k].range));
        b
    }
}

/// Per-input affine map of `[lo, hi]` onto `[−1, 1]`; constant inputs map
/// to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Normalization {
    pub fn from_box(b: &[(f64, f64)]) -> Normalization {
        Normalization {
            lo: b.iter().map(|r| r.0).collect(),
            hi: b.iter().map(|r| r.1).collect(),
        }
    }

    pub fn identity(n: usize) -> Normalization {
        Normalization {
            lo: vec![-1.0; n],
            hi: vec![1.0; n],
        }
    }

    pub fn apply(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = if hi > lo {
                2.0 * (*v - lo) / (hi - lo) - 1.0
            } else {
                0.0
            };
        }
    }
}

/// Anything that scores a state with `F(s) ∈ [0, 1]` and thresholds it.
pub trait StateClassifier: Send + Sync {
    fn score(&self, s: &State) -> f64;
    fn threshold(&self) -> f64;

    /// Positive iff `F(s) ≥ θ`.
    fn classify_at(&self, s: &State, theta: f64) -> bool {
        self.score(s) >= theta
    }

    fn classify(&self, s: &State) -> bool {
        self.classify_at(s, self.threshold())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Classifier {
    Mlp(Mlp),
    Nbor(Nbor),
    Bdt(Bdt),
}

impl StateClassifier for Classifier {
    fn score(&self, s: &State) -> f64 {
        match self {
            Classifier::Mlp(m) => m.score_state(s),
            Classifier::Nbor(n) => n.score(s),
            Classifier::Bdt(t) => t.score(s),
        }
    }

    fn threshold(&self) -> f64 {
        match self {
            Classifier::Mlp(m) => m.theta,
            Classifier::Nbor(_) | Classifier::Bdt(_) => 0.5,
        }
    }
}

impl Classifier {
    pub fn features(&self) -> &Features {
        match self {
            Classifier::Mlp(m) => &m.features,
            Classifier::Nbor(n) => &n.features,
            Classifier::Bdt(t) => &t.features,
        }
    }

    pub fn set_threshold(&mut self, theta: f64) {
        if let Classifier::Mlp(m) = self {
            m.theta = theta;
        }
    }

    /// Checks that the classifier's inputs fit the model.
    pub fn check_model(&self, ha: &HybridAutomaton) -> Result<(), ClassifyError> {
        let f = self.features();
        if f.n_modes != ha.modes.len()
            || f.dim != ha.dim()
            || f.params.iter().any(|&k| k >= ha.parameters.len())
        {
            return Err(ClassifyError::Shape(format!(
                "classifier expects {} mode(s) and {} variable(s); model '{}' has {} and {}",
                f.n_modes,
                f.dim,
                ha.name,
                ha.modes.len(),
                ha.dim()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, ClassifyError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Classifier, ClassifyError> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn save_classifier(c: &Classifier, path: impl AsRef<Path>) -> Result<(), ClassifyError> {
    std::fs::write(path, c.to_json()?)?;
    Ok(())
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<Classifier, ClassifyError> {
    Classifier::from_json(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lm: LmConfig,
    pub seed: u64,
    /// Hidden layer sizes overriding the family default.
    pub hidden: Option<Vec<usize>>,
    pub mode_encoding: ModeEncoding,
    /// Parameters used as inputs; `None` picks those varying in the data.
    pub params: Option<Vec<String>>,
    pub theta: f64,
    pub bdt_max_depth: usize,
    pub bdt_min_leaf: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lm: LmConfig::default(),
            seed: 0,
            hidden: None,
            mode_encoding: ModeEncoding::Scalar,
            params: None,
            theta: 0.5,
            bdt_max_depth: 20,
            bdt_min_leaf: 5,
        }
    }
}

impl TrainConfig {
    pub fn features(&self, ha: &HybridAutomaton, data: &SampleSet) -> Result<Features, ClassifyError> {
        let params = match &self.params {
            Some(names) => names
                .iter()
                .map(|n| {
                    ha.param_index(n)
                        .ok_or_else(|| ClassifyError::UnknownParameter(n.clone()))
                })
                .collect::<Result<Vec<_>, _>>()?,
            None => data.varying_params(),
        };
        Ok(Features::new(ha, params, self.mode_encoding))
    }
}

/// Normalized inputs and 0/1 targets of a dataset.
pub fn design(features: &Features, norm: &Normalization, data: &SampleSet) -> (Vec<Vec<f64>>, Vec<f64>) {
    data.samples
        .iter()
        .map(|s| {
            let mut x = features.extract(&s.state);
            norm.apply(&mut x);
            (x, s.label.as_f64())
        })
        .unzip()
}

/// A classifier family, selectable by name.
pub trait Trainer: Send + Sync {
    fn name(&self) -> &'static str;
    fn train(
        &self,
        ha: &HybridAutomaton,
        data: &SampleSet,
        cfg: &TrainConfig,
    ) -> Result<(Classifier, Option<TrainReport>), ClassifyError>;
}

/// Network trainer for a fixed architecture family.
pub struct NetTrainer {
    pub name: &'static str,
    pub arch: Arch,
}

impl Trainer for NetTrainer {
    fn name(&self) -> &'static str {
        self.name
    }

    fn train(
        &self,
        ha: &HybridAutomaton,
        data: &SampleSet,
        cfg: &TrainConfig,
    ) -> Result<(Classifier, Option<TrainReport>), ClassifyError> {
        if data.is_empty() {
            return Err(ClassifyError::Empty);
        }
        let features = cfg.features(ha, data)?;
        let norm = Normalization::from_box(&features.input_box(ha));
        let mut arch = self.arch.clone();
        if let Some(h) = &cfg.hidden {
            arch.hidden = h.clone();
        }
        let mut net = Mlp::init(&arch, features, norm, cfg.seed)?;
        net.theta = cfg.theta;
        let (x, y) = design(&net.features, &net.norm, data);
        let report = mlp::train_lm(&mut net, &x, &y, &cfg.lm);
        log::info!(
            "{}: {} epochs, mse {:.3e} ({:?})",
            self.name,
            report.epochs,
            report.loss.last().copied().unwrap_or(f64::NAN),
            report.stop
        );
        Ok((Classifier::Mlp(net), Some(report)))
    }
}

pub struct NborTrainer;
pub struct BdtTrainer;

impl Trainer for NborTrainer {
    fn name(&self) -> &'static str {
        "nbor"
    }

    fn train(
        &self,
        ha: &HybridAutomaton,
        data: &SampleSet,
        cfg: &TrainConfig,
    ) -> Result<(Classifier, Option<TrainReport>), ClassifyError> {
        let features = cfg.features(ha, data)?;
        Ok((Classifier::Nbor(Nbor::fit(ha, features, data)?), None))
    }
}

impl Trainer for BdtTrainer {
    fn name(&self) -> &'static str {
        "bdt"
    }

    fn train(
        &self,
        ha: &HybridAutomaton,
        data: &SampleSet,
        cfg: &TrainConfig,
    ) -> Result<(Classifier, Option<TrainReport>), ClassifyError> {
        let features = cfg.features(ha, data)?;
        let tree = Bdt::fit(features, data, cfg.bdt_max_depth, cfg.bdt_min_leaf)?;
        Ok((Classifier::Bdt(tree), None))
    }
}

pub fn trainers() -> Vec<Box<dyn Trainer>> {
    vec![
        Box::new(NetTrainer {
            name: "dnn-s",
            arch: Arch::dnn_s(),
        }),
        Box::new(NetTrainer {
            name: "dnn-r",
            arch: Arch::dnn_r(),
        }),
        Box::new(NetTrainer {
            name: "snn",
            arch: Arch::snn(),
        }),
        Box::new(NborTrainer),
        Box::new(BdtTrainer),
    ]
}

pub fn trainer(name: &str) -> Result<Box<dyn Trainer>, ClassifyError> {
    trainers()
        .into_iter()
        .find(|t| t.name() == name)
        .ok_or_else(|| ClassifyError::Unknown(name.to_string()))
}
