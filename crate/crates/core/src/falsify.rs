//! GA search for false negatives and the adaptation loop that retrains a
//! network on them until the search comes back empty.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::mlp::{adapt_pass, Mlp};
use crate::classify::{Classifier, StateClassifier};
use crate::eval::{confusion, scores, Confusion};
use crate::model::{HybridAutomaton, State};
use crate::rng::{self, derive_seed, streams};
use crate::sampling::{Sample, SampleSet};
use crate::sim::{Label, OracleConfig, Simulator};

#[derive(Debug, Error)]
pub enum FalsifyError {
    #[error("invalid GA settings: {0}")]
    Config(String),
    #[error("{0}")]
    Shape(String),
    #[error("adaptation needs a neural-network classifier")]
    NotAdaptable,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Objective cap where `F(s) = b(s)`.
pub const OBJECTIVE_CAP: f64 = 1e12;

/// `o(s) = 1 / (8 (F − b)²)`: in [0.125, 0.5] for wrong predictions at the
/// default threshold, larger for correct ones.
pub fn objective(f: f64, b: f64) -> f64 {
    let d = f - b;
    if d == 0.0 {
        OBJECTIVE_CAP
    } else {
        (1.0 / (8.0 * d * d)).min(OBJECTIVE_CAP)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub tournament: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    /// Mutation σ as a fraction of each axis's domain width.
    pub mutation_scale: f64,
    pub elitism: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            population: 100,
            generations: 50,
            tournament: 2,
            crossover_rate: 0.8,
            mutation_rate: 0.1,
            mutation_scale: 0.05,
            elitism: 2,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), FalsifyError> {
        let bad = |m: &str| Err(FalsifyError::Config(m.into()));
        if self.population < 2 {
            return bad("population must be at least 2");
        }
        if self.tournament == 0 {
            return bad("tournament size must be positive");
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) || !(0.0..=1.0).contains(&self.mutation_rate) {
            return bad("rates must lie in [0, 1]");
        }
        if !(self.mutation_scale >= 0.0 && self.mutation_scale.is_finite()) {
            return bad("mutation scale must be finite and nonnegative");
        }
        if self.elitism > self.population {
            return bad("elitism exceeds population");
        }
        Ok(())
    }
}

/// State quantized at 1e-9 for memoization and deduplication.
type Key = (usize, Vec<i64>);

fn key(s: &State) -> Key {
    let q = |v: &f64| (v * 1e9).round() as i64;
    (s.mode, s.x.iter().chain(&s.p).map(q).collect())
}

fn key_seed(master: u64, k: &Key) -> u64 {
    let mut h = derive_seed(master, streams::ORACLE, k.0 as u64);
    for &v in &k.1 {
        h = derive_seed(h, streams::ORACLE, v as u64);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaStats {
    /// Best (lowest) objective after each generation.
    pub best: Vec<f64>,
    pub oracle_calls: usize,
    pub oracle_failures: usize,
    /// Distinct false positives met during the search (logged, never used).
    pub fp_found: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Falsification {
    /// Distinct oracle-confirmed states with `b = 1` and `F < θ`, in order
    /// of discovery.
    pub fns: Vec<State>,
    pub stats: GaStats,
}

struct Ga<'a> {
    ha: &'a HybridAutomaton,
    sim: Simulator<'a>,
    oracle: &'a OracleConfig,
    c: &'a Classifier,
    theta: f64,
    params: Vec<f64>,
    seed: u64,
    memo: BTreeMap<Key, Option<bool>>,
    fns: Vec<State>,
    fn_seen: BTreeSet<Key>,
    fp_seen: BTreeSet<Key>,
    calls: usize,
    failures: usize,
}

impl Ga<'_> {
    fn random_state(&self, rng: &mut rng::Rng) -> State {
        let mode = rng.random_range(0..self.ha.modes.len());
        let x = self.ha.domain[mode]
            .0
            .iter()
            .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
            .collect();
        State {
            mode,
            x,
            p: self.params.clone(),
        }
    }

    /// Objectives of a population; candidates whose oracle run fails score
    /// the cap so selection avoids them.
    fn evaluate(&mut self, pop: &[State]) -> Vec<f64> {
        let keys: Vec<Key> = pop.iter().map(key).collect();
        let mut todo: Vec<(Key, &State)> = Vec::new();
        let mut queued = BTreeSet::new();
        for (k, s) in keys.iter().zip(pop) {
            if !self.memo.contains_key(k) && queued.insert(k.clone()) {
                todo.push((k.clone(), s));
            }
        }
        let (sim, oracle, seed) = (&self.sim, self.oracle, self.seed);
        let fresh: Vec<(Key, Option<bool>)> = todo
            .into_par_iter()
            .map(|(k, s)| {
                let v = sim.reach(s, oracle.n_rollouts, key_seed(seed, &k));
                (k, v.ok().map(|v| v.label.is_positive()))
            })
            .collect();
        for (k, b) in fresh {
            self.calls += 1;
            if b.is_none() {
                self.failures += 1;
            }
            self.memo.insert(k, b);
        }
        let f: Vec<f64> = pop.par_iter().map(|s| self.c.score(s)).collect();
        let mut out = Vec::with_capacity(pop.len());
        for ((k, s), f) in keys.into_iter().zip(pop).zip(f) {
            let Some(b) = self.memo[&k] else {
                out.push(OBJECTIVE_CAP);
                continue;
            };
            let predicted = f >= self.theta;
            if b && !predicted {
                if self.fn_seen.insert(k) {
                    self.fns.push(s.clone());
                }
            } else if !b && predicted {
                self.fp_seen.insert(k);
            }
            out.push(objective(f, if b { 1.0 } else { 0.0 }));
        }
        out
    }

    fn tournament(&self, fit: &[f64], size: usize, rng: &mut rng::Rng) -> usize {
        let mut best = rng.random_range(0..fit.len());
        for _ in 1..size {
            let i = rng.random_range(0..fit.len());
            if fit[i] < fit[best] {
                best = i;
            }
        }
        best
    }

    fn clip(&self, s: &mut State) {
        for (v, &(lo, hi)) in s.x.iter_mut().zip(&self.ha.domain[s.mode].0) {
            *v = v.clamp(lo, hi);
        }
    }

    fn crossover(&self, a: &State, b: &State, rng: &mut rng::Rng) -> State {
        let l: f64 = rng.random();
        let mode = if rng.random_bool(0.5) { a.mode } else { b.mode };
        let mut s = State {
            mode,
            x: a.x.iter().zip(&b.x).map(|(u, v)| l * u + (1.0 - l) * v).collect(),
            p: a.p.clone(),
        };
        self.clip(&mut s);
        s
    }

    fn mutate(&self, s: &mut State, cfg: &GaConfig, rng: &mut rng::Rng) {
        if self.ha.modes.len() > 1 && rng.random_bool(cfg.mutation_rate) {
            s.mode = rng.random_range(0..self.ha.modes.len());
        }
        for (v, &(lo, hi)) in s.x.iter_mut().zip(&self.ha.domain[s.mode].0) {
            let sd = cfg.mutation_scale * (hi - lo);
            if sd > 0.0 && rng.random_bool(cfg.mutation_rate) {
                *v += Normal::new(0.0, sd).expect("positive σ").sample(rng);
            }
        }
        self.clip(s);
    }
}

/// Searches the domain for false negatives of `c` at threshold `theta`,
/// minimizing `o(s)` with the oracle supplying `b(s)`. Every FN met in any
/// generation is returned, not just the final optima. Parameters are held
/// at `params` (model defaults when `None`).
pub fn ga_falsify(
    c: &Classifier,
    ha: &HybridAutomaton,
    oracle: &OracleConfig,
    theta: f64,
    params: Option<&[f64]>,
    cfg: &GaConfig,
) -> Result<Falsification, FalsifyError> {
    cfg.validate()?;
    c.check_model(ha).map_err(|e| FalsifyError::Shape(e.to_string()))?;
    let mut rng = rng::rng(derive_seed(cfg.seed, streams::GA, 0));
    let mut ga = Ga {
        ha,
        sim: Simulator::new(ha, &oracle.integrator),
        oracle,
        c,
        theta,
        params: params.map_or_else(|| ha.default_params(), <[f64]>::to_vec),
        seed: cfg.seed,
        memo: BTreeMap::new(),
        fns: Vec::new(),
        fn_seen: BTreeSet::new(),
        fp_seen: BTreeSet::new(),
        calls: 0,
        failures: 0,
    };
    let mut pop: Vec<State> = (0..cfg.population).map(|_| ga.random_state(&mut rng)).collect();
    let mut fit = ga.evaluate(&pop);
    let mut best = Vec::with_capacity(cfg.generations);
    for _ in 0..cfg.generations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&i, &j| fit[i].total_cmp(&fit[j]).then(i.cmp(&j)));
        let mut next: Vec<State> = order[..cfg.elitism].iter().map(|&i| pop[i].clone()).collect();
        while next.len() < cfg.population {
            let a = ga.tournament(&fit, cfg.tournament, &mut rng);
            let b = ga.tournament(&fit, cfg.tournament, &mut rng);
            let mut child = if rng.random_bool(cfg.crossover_rate) {
                ga.crossover(&pop[a], &pop[b], &mut rng)
            } else {
                pop[a].clone()
            };
            ga.mutate(&mut child, cfg, &mut rng);
            next.push(child);
        }
        pop = next;
        fit = ga.evaluate(&pop);
        best.push(fit.iter().copied().fold(f64::INFINITY, f64::min));
    }
    if ga.failures > 0 {
        log::warn!("{} candidate(s) skipped after oracle failures", ga.failures);
    }
    log::info!(
        "falsifier: {} FN and {} FP candidate(s) from {} oracle call(s)",
        ga.fns.len(),
        ga.fp_seen.len(),
        ga.calls
    );
    Ok(Falsification {
        fns: ga.fns,
        stats: GaStats {
            best,
            oracle_calls: ga.calls,
            oracle_failures: ga.failures,
            fp_found: ga.fp_seen.len(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub lr: f64,
    pub max_iters: usize,
    /// Gradient passes over each iteration's FNs, stopping early once they
    /// all classify positive.
    pub max_passes: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lr: 0.0005,
            max_iters: 50,
            max_passes: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// 0 is the classifier before any adaptation.
    pub iteration: usize,
    pub fn_found: usize,
    pub fp_found: usize,
    pub passes: usize,
    pub accuracy: f64,
    pub fn_rate: f64,
    pub fp_rate: f64,
    pub train_size: usize,
    /// Positive training samples in `D_k` predicted negative after
    /// adapting.
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTrace {
    pub rows: Vec<TraceRow>,
    pub converged: bool,
}

impl AdaptationTrace {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,fn_found,fp_found,passes,acc,fn_rate,fp_rate,train_size,violations")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.iteration, r.fn_found, r.fp_found, r.passes, r.accuracy, r.fn_rate, r.fp_rate, r.train_size, r.violations
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adapted {
    pub classifier: Classifier,
    pub trace: AdaptationTrace,
    /// Every FN found, with the iteration that found it.
    pub fns: Vec<(usize, State)>,
}

fn metrics(c: &Classifier, test: &SampleSet, theta: f64) -> Confusion {
    if test.is_empty() {
        return Confusion::default();
    }
    confusion(&scores(c, test), test, theta)
}

fn row(iteration: usize, counts: Confusion) -> TraceRow {
    let n = counts.n().max(1) as f64;
    TraceRow {
        iteration,
        fn_found: 0,
        fp_found: 0,
        passes: 0,
        accuracy: (counts.tp + counts.tn) as f64 / n,
        fn_rate: counts.fn_ as f64 / n,
        fp_rate: counts.fp as f64 / n,
        train_size: 0,
        violations: 0,
    }
}

fn violations(net: &Mlp, positives: &[State]) -> usize {
    positives.par_iter().filter(|s| net.score_state(s) < net.theta).count()
}

/// Alternates GA falsification with gradient adaptation on the FNs found
/// until the falsifier comes back empty or `max_iters` is reached.
pub fn adaptation_loop(
    c: &Classifier,
    ha: &HybridAutomaton,
    train: &SampleSet,
    test: &SampleSet,
    oracle: &OracleConfig,
    ga: &GaConfig,
    cfg: &AdaptConfig,
) -> Result<Adapted, FalsifyError> {
    let Classifier::Mlp(net) = c else {
        return Err(FalsifyError::NotAdaptable);
    };
    if !(cfg.lr >= 0.0) {
        return Err(FalsifyError::Config("learning rate must be nonnegative".into()));
    }
    let mut net = net.clone();
    let theta = net.theta;
    let mut positives: Vec<State> = train
        .samples
        .iter()
        .filter(|s| s.label.is_positive())
        .map(|s| s.state.clone())
        .collect();
    let mut train_size = train.len();
    let mut first = row(0, metrics(c, test, theta));
    first.train_size = train_size;
    first.violations = violations(&net, &positives);
    let mut rows = vec![first];
    let mut found = Vec::new();
    let mut converged = false;
    for k in 1..=cfg.max_iters {
        let current = Classifier::Mlp(net.clone());
        let gcfg = GaConfig {
            seed: derive_seed(ga.seed, streams::GA, k as u64),
            ..ga.clone()
        };
        let f = ga_falsify(&current, ha, oracle, theta, None, &gcfg)?;
        if f.fns.is_empty() {
            converged = true;
            let mut r = row(k, metrics(&current, test, theta));
            r.fp_found = f.stats.fp_found;
            r.train_size = train_size;
            r.violations = violations(&net, &positives);
            rows.push(r);
            break;
        }
        let inputs: Vec<Vec<f64>> = f.fns.iter().map(|s| net.input(s)).collect();
        let targets = vec![1.0; inputs.len()];
        let mut passes = 0;
        while passes < cfg.max_passes && f.fns.iter().any(|s| net.score_state(s) < theta) {
            adapt_pass(&mut net, &inputs, &targets, cfg.lr);
            passes += 1;
        }
        train_size += f.fns.len();
        positives.extend(f.fns.iter().cloned());
        let adapted = Classifier::Mlp(net.clone());
        let mut r = row(k, metrics(&adapted, test, theta));
        r.fn_found = f.fns.len();
        r.fp_found = f.stats.fp_found;
        r.passes = passes;
        r.train_size = train_size;
        r.violations = violations(&net, &positives);
        log::info!(
            "adaptation {k}: {} FN(s), {passes} pass(es), test acc {:.4} fn {:.4} fp {:.4}",
            r.fn_found,
            r.accuracy,
            r.fn_rate,
            r.fp_rate
        );
        rows.push(r);
        found.extend(f.fns.into_iter().map(|s| (k, s)));
    }
    if !converged {
        log::warn!("adaptation did not converge in {} iteration(s)", cfg.max_iters);
    }
    Ok(Adapted {
        classifier: Classifier::Mlp(net),
        trace: AdaptationTrace { rows, converged },
        fns: found,
    })
}

/// FN states as a dataset (all labeled positive) for inspection.
pub fn fn_dump(ha: &HybridAutomaton, fns: &[(usize, State)]) -> SampleSet {
    SampleSet {
        model: ha.name.clone(),
        samples: fns
            .iter()
            .map(|(k, s)| Sample {
                state: s.clone(),
                label: Label::Positive,
                strategy: format!("falsifier-{k}"),
                seed: *k as u64,
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::{Features, ModeEncoding, Normalization};
    use crate::classify::mlp::Arch;
    use crate::model::bundled;

    /// A network whose output is the constant `logsig(bias)`.
    fn constant(ha: &HybridAutomaton, bias: f64) -> Classifier {
        let features = Features::new(ha, vec![], ModeEncoding::Scalar);
        let norm = Normalization::from_box(&features.input_box(ha));
        let mut net = Mlp::init(&Arch::snn(), features, norm, 1).unwrap();
        let mut p = net.params();
        p.iter_mut().for_each(|w| *w = 0.0);
        let last = p.len() - 1;
        p[last] = bias;
        net.set_params(&p);
        Classifier::Mlp(net)
    }

    fn small() -> GaConfig {
        GaConfig {
            population: 30,
            generations: 10,
            seed: 3,
            ..GaConfig::default()
        }
    }

    #[test]
    fn objective_values() {
        assert_eq!(objective(0.0, 1.0), 0.125);
        assert_eq!(objective(1.0, 0.0), 0.125);
        assert_eq!(objective(0.5, 1.0), 0.5);
        assert_eq!(objective(0.3, 0.3), OBJECTIVE_CAP);
        assert_eq!(objective(1e-9, 0.0), OBJECTIVE_CAP);
    }

    #[test]
    fn rejects_bad_settings() {
        for g in [
            GaConfig { population: 1, ..GaConfig::default() },
            GaConfig { mutation_rate: 1.5, ..GaConfig::default() },
            GaConfig { elitism: 200, ..GaConfig::default() },
        ] {
            assert!(g.validate().is_err());
        }
    }

    #[test]
    fn constant_positive_has_no_false_negatives() {
        let ha = bundled("neuron").unwrap();
        let c = constant(&ha, 20.0);
        let f = ga_falsify(&c, &ha, &OracleConfig::default(), 0.5, None, &small()).unwrap();
        assert!(f.fns.is_empty());
        assert!(f.stats.fp_found > 0);
    }

    #[test]
    fn constant_negative_finds_oracle_positives() {
        let ha = bundled("neuron").unwrap();
        let c = constant(&ha, -20.0);
        let oracle = OracleConfig::default();
        let f = ga_falsify(&c, &ha, &oracle, 0.5, None, &small()).unwrap();
        assert!(!f.fns.is_empty());
        for s in f.fns.iter().take(20) {
            assert!(crate::sim::reach_oracle(&ha, s, &oracle, 99).unwrap().label.is_positive());
            assert!(c.score(s) < 0.5);
        }
        // elitism keeps the best objective from getting worse
        for w in f.stats.best.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let again = ga_falsify(&c, &ha, &oracle, 0.5, None, &small()).unwrap();
        assert_eq!(f.fns, again.fns);
    }

    #[test]
    fn adaptation_needs_a_network() {
        let ha = bundled("neuron").unwrap();
        let data = SampleSet {
            model: ha.name.clone(),
            samples: vec![Sample {
                state: State { mode: 0, x: vec![-60.0, 0.0], p: ha.default_params() },
                label: Label::Positive,
                strategy: "fixed".into(),
                seed: 0,
            }],
        };
        let features = Features::new(&ha, vec![], ModeEncoding::Scalar);
        let nb = crate::classify::Nbor::fit(&ha, features, &data).unwrap();
        let r = adaptation_loop(
            &Classifier::Nbor(nb),
            &ha,
            &data,
            &data,
            &OracleConfig::default(),
            &small(),
            &AdaptConfig::default(),
        );
        assert!(matches!(r, Err(FalsifyError::NotAdaptable)));
    }

    #[test]
    fn constant_positive_converges_immediately() {
        let ha = bundled("neuron").unwrap();
        let c = constant(&ha, 20.0);
        let empty = SampleSet { model: ha.name.clone(), samples: vec![] };
        let a = adaptation_loop(&c, &ha, &empty, &empty, &OracleConfig::default(), &small(), &AdaptConfig::default()).unwrap();
        assert!(a.trace.converged);
        assert_eq!(a.trace.rows.len(), 2);
        assert_eq!(a.classifier, c);
    }

    #[test]
    fn adaptation_pushes_found_negatives_positive() {
        let ha = bundled("neuron").unwrap();
        let c = constant(&ha, -1.0);
        let empty = SampleSet { model: ha.name.clone(), samples: vec![] };
        let cfg = AdaptConfig { lr: 0.05, max_iters: 2, max_passes: 500 };
        let a = adaptation_loop(&c, &ha, &empty, &empty, &OracleConfig::default(), &small(), &cfg).unwrap();
        assert!(!a.fns.is_empty());
        let first: Vec<&State> = a.fns.iter().filter(|(k, _)| *k == 1).map(|(_, s)| s).collect();
        let after_one = a.trace.rows[1].violations;
        assert!(a.trace.rows.windows(2).all(|w| w[0].train_size <= w[1].train_size));
        assert_eq!(after_one, 0, "iteration-1 FNs should reclassify positive");
        assert!(!first.is_empty());
    }
}
