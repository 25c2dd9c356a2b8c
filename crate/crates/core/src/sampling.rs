//! Labeled dataset generation (uniform, balanced, dynamics-aware and
//! parametric variants) and CSV persistence.
//!
//! Every sample index draws from its own derived seed, so datasets do not
//! depend on thread scheduling.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BoxRegion, HybridAutomaton, ModelError, State};
use crate::rng::{self, derive_seed, streams};
use crate::sim::{
    self, backward_sample_with, IntegratorConfig, Label, OracleConfig, Record, SimError, SimOptions, Simulator,
    TransitionPolicy,
};

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("rejection budget exhausted after {0} draws ({1})")]
    Budget(usize, &'static str),
    #[error("balanced sampling needs an even sample count, got {0}")]
    OddCount(usize),
    #[error("model has no init region")]
    NoInit,
    #[error("dynamics-aware pool is empty")]
    EmptyPool,
    #[error("horizon T' = {0} must exceed the model time bound {1}")]
    ShortHorizon(f64, f64),
    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),
    #[error("unknown sampling strategy '{0}'")]
    UnknownStrategy(String),
    #[error("simulation failed for sample {index}: {source}")]
    Sim { index: usize, source: SimError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dataset line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SamplingError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub state: State,
    pub label: Label,
    pub strategy: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    pub model: String,
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(negatives, positives)`.
    pub fn counts(&self) -> (usize, usize) {
        let pos = self.samples.iter().filter(|s| s.label.is_positive()).count();
        (self.samples.len() - pos, pos)
    }

    /// Appends another set drawn from the same model.
    pub fn extend(&mut self, other: SampleSet) {
        self.samples.extend(other.samples);
    }

    /// Parameters whose value differs between samples.
    pub fn varying_params(&self) -> Vec<usize> {
        let Some(first) = self.samples.first() else {
            return Vec::new();
        };
        (0..first.state.p.len())
            .filter(|&k| {
                self.samples
                    .iter()
                    .any(|s| s.state.p[k].to_bits() != first.state.p[k].to_bits())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub oracle: OracleConfig,
    /// Parameters drawn per sample from their declared ranges.
    pub active_params: Vec<String>,
    /// Draws allowed per sample before giving up.
    pub budget: usize,
    /// Backward-simulation retries per positive attempt.
    pub backward_retries: usize,
    /// Integrator for reverse runs. Looser than the oracle's: candidates are
    /// forward-verified anyway, and tight tolerances make runs chatter
    /// along discontinuities of switching control laws.
    pub backward: IntegratorConfig,
    /// Dynamics-aware horizon; defaults to twice the model time bound.
    pub t_prime: Option<f64>,
    /// Dynamics-aware seed count; defaults to `max(100, n / 10)`.
    pub init_seeds: Option<usize>,
    /// Dynamics-aware pool grid; defaults to `T' / 200`.
    pub grid: Option<f64>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            oracle: OracleConfig::default(),
            active_params: Vec::new(),
            budget: 10_000,
            backward_retries: 100,
            backward: IntegratorConfig {
                rel_tol: 1e-4,
                abs_tol: 1e-6,
                max_steps: 5_000,
                ..IntegratorConfig::default()
            },
            t_prime: None,
            init_seeds: None,
            grid: None,
        }
    }
}

/// A dataset generation strategy, selectable by name.
pub trait SamplingStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn sample(
        &self,
        ha: &HybridAutomaton,
        n: usize,
        cfg: &SamplingConfig,
        seed: u64,
    ) -> Result<SampleSet>;
}

pub struct Uniform;
pub struct Balanced;
pub struct DynamicsAware;

pub fn strategies() -> Vec<Box<dyn SamplingStrategy>> {
    vec![Box::new(Uniform), Box::new(Balanced), Box::new(DynamicsAware)]
}

pub fn strategy(name: &str) -> Result<Box<dyn SamplingStrategy>> {
    strategies()
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| SamplingError::UnknownStrategy(name.to_string()))
}

fn uniform_in(b: &BoxRegion, rng: &mut rng::Rng) -> Vec<f64> {
    b.0.iter()
        .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..hi) } else { lo })
        .collect()
}

/// Parameter vector for sample `index`: active parameters uniform in their
/// ranges, the rest at their defaults.
fn draw_params(ha: &HybridAutomaton, active: &[usize], seed: u64, index: u64) -> Vec<f64> {
    let mut p = ha.default_params();
    if active.is_empty() {
        return p;
    }
    let mut rng = rng::rng(derive_seed(seed, streams::PARAMS, index));
    for &k in active {
        let (lo, hi) = ha.parameters[k].range;
        p[k] = if hi > lo { rng.random_range(lo..hi) } else { lo };
    }
    p
}

fn active_indices(ha: &HybridAutomaton, names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            ha.param_index(n)
                .ok_or_else(|| SamplingError::UnknownParameter(n.clone()))
        })
        .collect()
}

fn same_domains(ha: &HybridAutomaton) -> bool {
    ha.domain.windows(2).all(|w| w[0] == w[1])
}

/// Draws a state from `S(M) \ U`: a point of the shared domain box and a
/// uniformly chosen mode whose invariant holds there, or, when mode domains
/// differ, a uniform mode followed by a point of its domain and invariant.
pub fn draw_state(
    ha: &HybridAutomaton,
    p: Vec<f64>,
    rng: &mut rng::Rng,
    budget: usize,
) -> Result<State> {
    let shared = same_domains(ha);
    let mut s = State {
        mode: 0,
        x: Vec::new(),
        p,
    };
    for _ in 0..budget {
        if shared {
            s.x = uniform_in(&ha.domain[0], rng);
            let modes: Vec<usize> = (0..ha.modes.len())
                .filter(|&m| {
                    s.mode = m;
                    ha.in_invariant(&s)
                })
                .collect();
            if modes.is_empty() {
                continue;
            }
            s.mode = modes[rng.random_range(0..modes.len())];
        } else {
            s.mode = rng.random_range(0..ha.modes.len());
            s.x = uniform_in(&ha.domain[s.mode], rng);
            if !ha.in_invariant(&s) {
                continue;
            }
        }
        if !ha.in_unsafe(&s) {
            return Ok(s);
        }
    }
    Err(SamplingError::Budget(budget, "state outside the unsafe set"))
}

/// Draws an unsafe state from the model's unsafe sampling box.
pub fn draw_unsafe(
    ha: &HybridAutomaton,
    p: Vec<f64>,
    rng: &mut rng::Rng,
    budget: usize,
) -> Result<State> {
    let mut s = State {
        mode: 0,
        x: Vec::new(),
        p,
    };
    for _ in 0..budget {
        s.mode = rng.random_range(0..ha.modes.len());
        s.x = uniform_in(&ha.unsafe_domain[s.mode], rng);
        if ha.in_unsafe(&s) && ha.in_invariant(&s) {
            return Ok(s);
        }
    }
    Err(SamplingError::Budget(budget, "unsafe state"))
}

fn label(
    sim: &Simulator<'_>,
    s: &State,
    cfg: &OracleConfig,
    seed: u64,
    index: usize,
) -> Result<Label> {
    sim.reach(s, cfg.n_rollouts, seed)
        .map(|v| v.label)
        .map_err(|source| SamplingError::Sim { index, source })
}

impl SamplingStrategy for Uniform {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn sample(
        &self,
        ha: &HybridAutomaton,
        n: usize,
        cfg: &SamplingConfig,
        seed: u64,
    ) -> Result<SampleSet> {
        let active = active_indices(ha, &cfg.active_params)?;
        let sim = Simulator::new(ha, &cfg.oracle.integrator);
        let samples = (0..n)
            .into_par_iter()
            .map(|i| {
                let sample_seed = derive_seed(seed, streams::UNIFORM, i as u64);
                let mut rng = rng::rng(sample_seed);
                let p = draw_params(ha, &active, seed, i as u64);
                let state = draw_state(ha, p, &mut rng, cfg.budget)?;
                let label = label(&sim, &state, &cfg.oracle, sample_seed, i)?;
                Ok(Sample {
                    state,
                    label,
                    strategy: self.name().into(),
                    seed: sample_seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleSet {
            model: ha.name.clone(),
            samples,
        })
    }
}

impl SamplingStrategy for Balanced {
    fn name(&self) -> &'static str {
        "balanced"
    }

    fn sample(
        &self,
        ha: &HybridAutomaton,
        n: usize,
        cfg: &SamplingConfig,
        seed: u64,
    ) -> Result<SampleSet> {
        if n % 2 != 0 {
            return Err(SamplingError::OddCount(n));
        }
        let half = n / 2;
        let active = active_indices(ha, &cfg.active_params)?;
        let sim = Simulator::new(ha, &cfg.oracle.integrator);
        let rev = ha.reverse()?;
        let rev_sim = Simulator::new(&rev, &cfg.backward);

        let negatives = (0..half)
            .into_par_iter()
            .map(|i| {
                let sample_seed = derive_seed(seed, streams::BALANCED_NEG, i as u64);
                let mut rng = rng::rng(sample_seed);
                let p = draw_params(ha, &active, seed, i as u64);
                for _ in 0..cfg.budget {
                    let state = draw_state(ha, p.clone(), &mut rng, cfg.budget)?;
                    if label(&sim, &state, &cfg.oracle, sample_seed, i)? == Label::Negative {
                        return Ok(Sample {
                            state,
                            label: Label::Negative,
                            strategy: self.name().into(),
                            seed: sample_seed,
                        });
                    }
                }
                Err(SamplingError::Budget(cfg.budget, "negative state"))
            })
            .collect::<Result<Vec<_>>>()?;

        let positives = (0..half)
            .into_par_iter()
            .map(|i| {
                let index = (half + i) as u64;
                let sample_seed = derive_seed(seed, streams::BALANCED_POS, i as u64);
                let mut rng = rng::rng(sample_seed);
                let p = draw_params(ha, &active, seed, index);
                let mut rejected = 0usize;
                for attempt in 0..cfg.budget {
                    let u = draw_unsafe(ha, p.clone(), &mut rng, cfg.budget)?;
                    let run_seed = derive_seed(sample_seed, streams::BALANCED_POS, attempt as u64);
                    let state = match backward_sample_with(
                        &rev_sim,
                        &u,
                        ha.time_bound,
                        run_seed,
                        cfg.backward_retries,
                    ) {
                        Ok((s, _)) => s,
                        Err(SimError::BackwardBudget(_)) => continue,
                        Err(source) => return Err(SamplingError::Sim { index: i, source }),
                    };
                    // forward verification guards against reversal drift
                    if label(&sim, &state, &cfg.oracle, run_seed, i)? == Label::Positive {
                        if rejected > 0 {
                            log::debug!("positive {i}: {rejected} backward sample(s) failed verification");
                        }
                        return Ok(Sample {
                            state,
                            label: Label::Positive,
                            strategy: self.name().into(),
                            seed: sample_seed,
                        });
                    }
                    rejected += 1;
                    log::warn!("backward sample {:?} failed forward verification", state.x);
                }
                Err(SamplingError::Budget(cfg.budget, "verified positive state"))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut samples = negatives;
        samples.extend(positives);
        Ok(SampleSet {
            model: ha.name.clone(),
            samples,
        })
    }
}

/// States visited by random-walk runs from the init region, recorded on a
/// fixed time grid; entries in the unsafe set are dropped.
pub fn visit_pool(
    ha: &HybridAutomaton,
    n_seeds: usize,
    t_prime: f64,
    grid: f64,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<Vec<State>> {
    let init = ha.init.as_ref().ok_or(SamplingError::NoInit)?;
    let init_modes: Vec<usize> = (0..init.len()).filter(|&m| init[m].is_some()).collect();
    if init_modes.is_empty() {
        return Err(SamplingError::NoInit);
    }
    let active = active_indices(ha, &cfg.active_params)?;
    let sim = Simulator::new(ha, &cfg.oracle.integrator);
    let opts = SimOptions {
        stop_on_unsafe: false,
        record: Record::Grid(grid),
    };
    let runs: Vec<Vec<State>> = (0..n_seeds)
        .into_par_iter()
        .map(|i| {
            let run_seed = derive_seed(seed, streams::INIT, i as u64);
            let mut rng = rng::rng(run_seed);
            let p = draw_params(ha, &active, run_seed, i as u64);
            let mut s0 = None;
            for _ in 0..cfg.budget {
                let mode = init_modes[rng.random_range(0..init_modes.len())];
                let b = init[mode].as_ref().expect("init mode");
                let s = State {
                    mode,
                    x: uniform_in(b, &mut rng),
                    p: p.clone(),
                };
                if ha.in_invariant(&s) && !ha.in_unsafe(&s) {
                    s0 = Some(s);
                    break;
                }
            }
            let Some(s0) = s0 else {
                return Err(SamplingError::Budget(cfg.budget, "initial state"));
            };
            let traj = match sim.run(&s0, t_prime, TransitionPolicy::RandomWalk, opts, run_seed) {
                Ok(t) => t,
                Err(e) => {
                    log::warn!("dynamics-aware run {i} dropped: {e}");
                    return Ok(Vec::new());
                }
            };
            let mut out = Vec::new();
            for seg in &traj.segments {
                for x in &seg.states {
                    let s = State {
                        mode: seg.mode,
                        x: x.clone(),
                        p: p.clone(),
                    };
                    if !ha.in_unsafe(&s) {
                        out.push(s);
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(runs.into_iter().flatten().collect())
}

impl SamplingStrategy for DynamicsAware {
    fn name(&self) -> &'static str {
        "dynamics-aware"
    }

    fn sample(
        &self,
        ha: &HybridAutomaton,
        n: usize,
        cfg: &SamplingConfig,
        seed: u64,
    ) -> Result<SampleSet> {
        let t_prime = cfg.t_prime.unwrap_or(2.0 * ha.time_bound);
        if t_prime <= ha.time_bound {
            return Err(SamplingError::ShortHorizon(t_prime, ha.time_bound));
        }
        let n_seeds = cfg.init_seeds.unwrap_or((n / 10).max(100));
        let grid = cfg.grid.unwrap_or(t_prime / 200.0);
        let pool = visit_pool(ha, n_seeds, t_prime, grid, cfg, seed)?;
        if pool.is_empty() {
            return Err(SamplingError::EmptyPool);
        }
        let mut rng = rng::rng(derive_seed(seed, streams::DYNAMICS, 0));
        let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..pool.len())).collect();
        let sim = Simulator::new(ha, &cfg.oracle.integrator);
        let samples = picks
            .into_par_iter()
            .enumerate()
            .map(|(i, k)| {
                let sample_seed = derive_seed(seed, streams::DYNAMICS, i as u64 + 1);
                let state = pool[k].clone();
                let label = label(&sim, &state, &cfg.oracle, sample_seed, i)?;
                Ok(Sample {
                    state,
                    label,
                    strategy: self.name().into(),
                    seed: sample_seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleSet {
            model: ha.name.clone(),
            samples,
        })
    }
}

/// Labels a single state with the oracle; convenience for callers outside
/// the sampling strategies.
pub fn label_state(ha: &HybridAutomaton, s: &State, cfg: &OracleConfig, seed: u64) -> Result<Label> {
    sim::reach_oracle(ha, s, cfg, seed)
        .map(|v| v.label)
        .map_err(|source| SamplingError::Sim { index: 0, source })
}

fn header(ha: &HybridAutomaton) -> String {
    let mut h = String::from("mode");
    for v in &ha.variables {
        let _ = write!(h, ",{v}");
    }
    for p in &ha.parameters {
        let _ = write!(h, ",{}", p.name);
    }
    h.push_str(",label,strategy,seed");
    h
}

/// Writes `mode,<variables>,<parameters>,label,strategy,seed`. Floats use
/// the shortest decimal form that parses back to the same bits.
pub fn write_dataset<W: Write>(ha: &HybridAutomaton, ds: &SampleSet, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", header(ha))?;
    let mut line = String::new();
    for s in &ds.samples {
        line.clear();
        line.push_str(&ha.modes[s.state.mode].id);
        for v in s.state.x.iter().chain(&s.state.p) {
            let _ = write!(line, ",{v:?}");
        }
        let _ = write!(
            line,
            ",{},{},{}",
            u8::from(s.label.is_positive()),
            s.strategy,
            s.seed
        );
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn save_dataset(ha: &HybridAutomaton, ds: &SampleSet, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_dataset(ha, ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(ha: &HybridAutomaton, r: R) -> Result<SampleSet> {
    let mut lines = r.lines().enumerate().peekable();
    let err = |line: usize, msg: String| SamplingError::Csv { line, msg };
    // leading `#` lines carry provenance and are skipped
    while let Some((_, Ok(l))) = lines.peek() {
        if !l.starts_with('#') {
            break;
        }
        lines.next();
    }
    let (i0, first) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let first = first?;
    let expected = header(ha);
    if first.trim_end() != expected {
        return Err(err(i0 + 1, format!("header '{first}' does not match model '{expected}'")));
    }
    let (n, k) = (ha.dim(), ha.parameters.len());
    let mut samples = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.trim_end().split(',').collect();
        if cols.len() != n + k + 4 {
            return Err(err(lineno, format!("expected {} columns, found {}", n + k + 4, cols.len())));
        }
        let mode = ha
            .mode_index(cols[0])
            .ok_or_else(|| err(lineno, format!("unknown mode '{}'", cols[0])))?;
        let nums = cols[1..1 + n + k]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|e| err(lineno, format!("'{c}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let label = match cols[n + k + 1] {
            "1" => Label::Positive,
            "0" => Label::Negative,
            other => return Err(err(lineno, format!("label '{other}' is not 0 or 1"))),
        };
        let seed = cols[n + k + 3]
            .parse::<u64>()
            .map_err(|e| err(lineno, format!("seed: {e}")))?;
        samples.push(Sample {
            state: State {
                mode,
                x: nums[..n].to_vec(),
                p: nums[n..].to_vec(),
            },
            label,
            strategy: cols[n + k + 2].to_string(),
            seed,
        });
    }
    Ok(SampleSet {
        model: ha.name.clone(),
        samples,
    })
}

pub fn load_dataset(ha: &HybridAutomaton, path: impl AsRef<Path>) -> Result<SampleSet> {
    let f = std::fs::File::open(path)?;
    read_dataset(ha, BufReader::new(f))
}
