//! Empirical accuracy / FN / FP rates with Clopper–Pearson intervals,
//! Wald's sequential probability ratio test, threshold sweeps and
//! architecture sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{Classifier, StateClassifier, TrainConfig, Trainer};
use crate::model::HybridAutomaton;
use crate::sampling::SampleSet;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test set is empty")]
    Empty,
    #[error("SPRT needs 0 < θ−δ and θ+δ < 1 (θ = {theta}, δ = {delta})")]
    Indifference { theta: f64, delta: f64 },
    #[error("α and β must lie in (0, 1)")]
    Strength,
    #[error("{0} must be nonempty")]
    EmptyGrid(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn n(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Rate {
    fn new(k: usize, n: usize, conf: f64) -> Rate {
        let (lo, hi) = clopper_pearson(k, n, conf);
        Rate {
            value: k as f64 / n as f64,
            lo,
            hi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub theta: f64,
    pub confidence: f64,
    pub counts: Confusion,
    pub accuracy: Rate,
    pub fn_rate: Rate,
    pub fp_rate: Rate,
}

impl EvalReport {
    pub fn from_counts(counts: Confusion, theta: f64, confidence: f64) -> EvalReport {
        let n = counts.n();
        EvalReport {
            n,
            theta,
            confidence,
            counts,
            accuracy: Rate::new(counts.tp + counts.tn, n, confidence),
            fn_rate: Rate::new(counts.fn_, n, confidence),
            fp_rate: Rate::new(counts.fp, n, confidence),
        }
    }
}

/// Scores `F(s)` for every test sample, in order.
pub fn scores(c: &Classifier, test: &SampleSet) -> Vec<f64> {
    test.samples.par_iter().map(|s| c.score(&s.state)).collect()
}

pub fn confusion(scores: &[f64], test: &SampleSet, theta: f64) -> Confusion {
    let mut c = Confusion::default();
    for (f, s) in scores.iter().zip(&test.samples) {
        c.add(*f >= theta, s.label.is_positive());
    }
    c
}

/// Accuracy, FN and FP rates of the thresholded classifier on `test`.
pub fn evaluate(c: &Classifier, test: &SampleSet, theta: f64, confidence: f64) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::Empty);
    }
    let s = scores(c, test);
    Ok(EvalReport::from_counts(confusion(&s, test, theta), theta, confidence))
}

fn beta_reg(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        statrs::function::beta::beta_reg(a, b, x)
    }
}

/// Smallest `p` with `I_p(a, b) ≥ target`, by bisection to 1e-12.
fn beta_quantile(a: f64, b: f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if beta_reg(a, b, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact two-sided binomial confidence interval for `k` successes in `n`
/// trials.
pub fn clopper_pearson(k: usize, n: usize, conf: f64) -> (f64, f64) {
    assert!(k <= n, "k = {k} exceeds n = {n}");
    if n == 0 {
        return (0.0, 1.0);
    }
    let alpha = 1.0 - conf;
    let (kf, nf) = (k as f64, n as f64);
    let lo = if k == 0 {
        0.0
    } else {
        beta_quantile(kf, nf - kf + 1.0, alpha / 2.0)
    };
    let hi = if k == n {
        1.0
    } else {
        beta_quantile(kf + 1.0, nf - kf, 1.0 - alpha / 2.0)
    };
    (lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SprtKind {
    /// H0: P(correct) ≥ θ. Stream items are "prediction correct".
    AccuracyAtLeast,
    /// H0: P(error) ≤ θ. Stream items are "error occurred".
    RateAtMost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    AcceptH0,
    AcceptH1,
    Undecided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SprtResult {
    pub kind: SprtKind,
    pub theta: f64,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub decision: Decision,
    /// Samples consumed.
    pub m: usize,
    pub successes: usize,
    /// `ln(p1m / p0m)` at the stopping point.
    pub log_ratio: f64,
}

/// SPRT bounds `(A, B) = ((1−β)/α, β/(1−α))`.
pub fn sprt_bounds(alpha: f64, beta: f64) -> (f64, f64) {
    ((1.0 - beta) / alpha, beta / (1.0 - alpha))
}

/// Wald's test of `p ≥ θ` against `p ≤ θ` with indifference half-width
/// `δ`: `p0 = θ+δ`, `p1 = θ−δ`. Rate tests count the absence of an error
/// as a success against `1−θ`, so both forms share one engine.
pub fn sprt<I: IntoIterator<Item = bool>>(
    stream: I,
    kind: SprtKind,
    theta: f64,
    delta: f64,
    alpha: f64,
    beta: f64,
    max_samples: usize,
) -> Result<SprtResult, EvalError> {
    if !(alpha > 0.0 && alpha < 1.0 && beta > 0.0 && beta < 1.0) {
        return Err(EvalError::Strength);
    }
    if !(theta - delta > 0.0 && theta + delta < 1.0) {
        return Err(EvalError::Indifference { theta, delta });
    }
    let th = match kind {
        SprtKind::AccuracyAtLeast => theta,
        SprtKind::RateAtMost => 1.0 - theta,
    };
    let (p0, p1) = (th + delta, th - delta);
    let ls = (p1 / p0).ln();
    let lf = ((1.0 - p1) / (1.0 - p0)).ln();
    let (a, b) = sprt_bounds(alpha, beta);
    let (ln_a, ln_b) = (a.ln(), b.ln());
    let mut res = SprtResult {
        kind,
        theta,
        delta,
        alpha,
        beta,
        decision: Decision::Undecided,
        m: 0,
        successes: 0,
        log_ratio: 0.0,
    };
    for item in stream.into_iter().take(max_samples) {
        let success = match kind {
            SprtKind::AccuracyAtLeast => item,
            SprtKind::RateAtMost => !item,
        };
        res.m += 1;
        res.successes += usize::from(success);
        let failures = res.m - res.successes;
        res.log_ratio = res.successes as f64 * ls + failures as f64 * lf;
        if res.log_ratio <= ln_b {
            res.decision = Decision::AcceptH0;
            break;
        }
        if res.log_ratio >= ln_a {
            res.decision = Decision::AcceptH1;
            break;
        }
    }
    Ok(res)
}

/// Samples an all-success stream needs before H0 is accepted:
/// `⌈ln B / ln(p1/p0)⌉`.
pub fn sprt_all_success_count(theta: f64, delta: f64, alpha: f64, beta: f64) -> usize {
    let (_, b) = sprt_bounds(alpha, beta);
    (b.ln() / ((theta - delta) / (theta + delta)).ln()).ceil() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub theta: f64,
    pub accuracy: f64,
    pub fn_rate: f64,
    pub fp_rate: f64,
    pub counts: Confusion,
}

/// Accuracy / FN / FP over a grid of thresholds, scoring each sample once.
pub fn threshold_sweep(c: &Classifier, test: &SampleSet, grid: &[f64]) -> Result<Vec<SweepPoint>, EvalError> {
    if test.is_empty() {
        return Err(EvalError::Empty);
    }
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid("threshold grid"));
    }
    let s = scores(c, test);
    Ok(sweep_scores(&s, test, grid))
}

pub fn sweep_scores(scores: &[f64], test: &SampleSet, grid: &[f64]) -> Vec<SweepPoint> {
    grid.iter()
        .map(|&theta| {
            let counts = confusion(scores, test, theta);
            let n = counts.n() as f64;
            SweepPoint {
                theta,
                accuracy: (counts.tp + counts.tn) as f64 / n,
                fn_rate: counts.fn_ as f64 / n,
                fp_rate: counts.fp as f64 / n,
                counts,
            }
        })
        .collect()
}

/// Evenly spaced thresholds strictly inside (0, 1).
pub fn theta_grid(points: usize) -> Vec<f64> {
    (1..=points).map(|i| i as f64 / (points + 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSweep {
    pub layers: Vec<usize>,
    pub neurons: Vec<usize>,
    /// `accuracy[i][j]` for `layers[i]` hidden layers of `neurons[j]`
    /// units; `None` where training failed.
    pub accuracy: Vec<Vec<Option<f64>>>,
    pub failures: Vec<String>,
}

impl ArchSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layers");
        for n in &self.neurons {
            out.push_str(&format!(",{n}"));
        }
        out.push('\n');
        for (l, row) in self.layers.iter().zip(&self.accuracy) {
            out.push_str(&l.to_string());
            for v in row {
                match v {
                    Some(a) => out.push_str(&format!(",{a}")),
                    None => out.push_str(",nan"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one network per (layers, neurons) cell with shared data and seed
/// and reports test accuracy at the configured threshold.
pub fn arch_sweep(
    ha: &HybridAutomaton,
    trainer: &dyn Trainer,
    train: &SampleSet,
    test: &SampleSet,
    layers: &[usize],
    neurons: &[usize],
    cfg: &TrainConfig,
) -> Result<ArchSweep, EvalError> {
    if layers.is_empty() {
        return Err(EvalError::EmptyGrid("layer grid"));
    }
    if neurons.is_empty() {
        return Err(EvalError::EmptyGrid("neuron grid"));
    }
    if test.is_empty() {
        return Err(EvalError::Empty);
    }
    let cells: Vec<(usize, usize)> = layers
        .iter()
        .flat_map(|&l| neurons.iter().map(move |&n| (l, n)))
        .collect();
    let results: Vec<Result<f64, String>> = cells
        .par_iter()
        .map(|&(l, n)| {
            let cell_cfg = TrainConfig {
                hidden: Some(vec![n; l]),
                ..cfg.clone()
            };
            let (c, _) = trainer
                .train(ha, train, &cell_cfg)
                .map_err(|e| format!("{l}x{n}: {e}"))?;
            let r = evaluate(&c, test, cfg.theta, 0.99).map_err(|e| format!("{l}x{n}: {e}"))?;
            Ok(r.accuracy.value)
        })
        .collect();
    let mut accuracy = vec![vec![None; neurons.len()]; layers.len()];
    let mut failures = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(a) => accuracy[k / neurons.len()][k % neurons.len()] = Some(a),
            Err(e) => failures.push(e),
        }
    }
    Ok(ArchSweep {
        layers: layers.to_vec(),
        neurons: neurons.to_vec(),
        accuracy,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::{Features, ModeEncoding, Nbor};
    use crate::model::State;
    use crate::sampling::Sample;
    use crate::sim::Label;
    use rand::{Rng, SeedableRng};

    fn set(points: &[(f64, bool)]) -> SampleSet {
        SampleSet {
            model: "t".into(),
            samples: points
                .iter()
                .map(|&(x, b)| Sample {
                    state: State {
                        mode: 0,
                        x: vec![x],
                        p: vec![],
                    },
                    label: Label::from_bool(b),
                    strategy: "fixed".into(),
                    seed: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn four_sample_rates() {
        let test = set(&[(1.0, true), (1.0, false), (0.0, true), (0.0, false)]);
        // predictions: 1, 1, 0, 0 via scores equal to x
        let s: Vec<f64> = test.samples.iter().map(|s| s.state.x[0]).collect();
        let r = EvalReport::from_counts(confusion(&s, &test, 0.5), 0.5, 0.99);
        assert_eq!(r.accuracy.value, 0.5);
        assert_eq!(r.fp_rate.value, 0.25);
        assert_eq!(r.fn_rate.value, 0.25);
        assert_eq!(r.counts.n(), 4);
    }

    #[test]
    fn extreme_predictions() {
        let test = set(&[(0.9, true), (0.1, false)]);
        let s = [0.9, 0.1];
        let r = EvalReport::from_counts(confusion(&s, &test, 0.5), 0.5, 0.99);
        assert_eq!((r.accuracy.value, r.fp_rate.value, r.fn_rate.value), (1.0, 0.0, 0.0));
        let neg = set(&[(0.0, false), (0.0, false)]);
        let r = EvalReport::from_counts(confusion(&[1.0, 1.0], &neg, 0.5), 0.5, 0.99);
        assert_eq!((r.accuracy.value, r.fp_rate.value, r.fn_rate.value), (0.0, 1.0, 0.0));
    }

    #[test]
    fn clopper_pearson_closed_form_and_symmetry() {
        let (lo, hi) = clopper_pearson(0, 100, 0.99);
        assert_eq!(lo, 0.0);
        assert!((hi - (1.0 - 0.005f64.powf(0.01))).abs() < 1e-10);
        let (lo2, hi2) = clopper_pearson(100, 100, 0.99);
        assert_eq!(hi2, 1.0);
        assert!((lo2 - (1.0 - hi)).abs() < 1e-10);
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = r.random_range(1..500);
            let k = r.random_range(0..=n);
            let (lo, hi) = clopper_pearson(k, n, 0.99);
            let p = k as f64 / n as f64;
            assert!(lo <= p && p <= hi);
            let (lo95, hi95) = clopper_pearson(k, n, 0.95);
            assert!(lo <= lo95 + 1e-12 && hi95 <= hi + 1e-12);
        }
    }

    #[test]
    fn sprt_bounds_and_counts() {
        let (a, b) = sprt_bounds(0.01, 0.01);
        assert!((a - 99.0).abs() < 1e-12);
        assert!((b - 0.01 / 0.99).abs() < 1e-15);
        let r = sprt(std::iter::repeat(true), SprtKind::AccuracyAtLeast, 0.997, 0.001, 0.01, 0.01, 1_000_000).unwrap();
        assert_eq!(r.decision, Decision::AcceptH0);
        assert_eq!(r.m, sprt_all_success_count(0.997, 0.001, 0.01, 0.01));
        let empty = sprt(std::iter::empty(), SprtKind::AccuracyAtLeast, 0.997, 0.001, 0.01, 0.01, 10).unwrap();
        assert_eq!((empty.decision, empty.m), (Decision::Undecided, 0));
        assert!(sprt(std::iter::empty(), SprtKind::AccuracyAtLeast, 0.9995, 0.001, 0.01, 0.01, 10).is_err());
    }

    #[test]
    fn rate_test_flips_direction() {
        let r = sprt(std::iter::repeat(false), SprtKind::RateAtMost, 0.002, 0.001, 0.01, 0.01, 1_000_000).unwrap();
        assert_eq!(r.decision, Decision::AcceptH0);
        assert_eq!(r.m, sprt_all_success_count(0.998, 0.001, 0.01, 0.01));
        let r = sprt(std::iter::repeat(true), SprtKind::RateAtMost, 0.002, 0.001, 0.01, 0.01, 1_000_000).unwrap();
        assert_eq!(r.decision, Decision::AcceptH1);
    }

    #[test]
    fn sweep_is_monotone_and_matches_evaluate() {
        let ha = crate::model::parse_model(
            r#"{"variables": ["x"], "modes": [{"id": "a", "flow": {"x": "0"}}],
                "unsafe": "x > 100", "domain": {"a": {"x": [-1, 1]}}, "T": 1}"#,
        )
        .unwrap();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let train = set(&(0..50).map(|_| (r.random_range(-1.0..1.0), r.random_bool(0.5))).collect::<Vec<_>>());
        let test = set(&(0..300).map(|_| {
            let x: f64 = r.random_range(-1.0..1.0);
            (x, x > 0.2)
        }).collect::<Vec<_>>());
        let features = Features::new(&ha, vec![], ModeEncoding::Scalar);
        let c = Classifier::Nbor(Nbor::fit(&ha, features, &train).unwrap());
        let grid = theta_grid(100);
        let sweep = threshold_sweep(&c, &test, &grid).unwrap();
        for w in sweep.windows(2) {
            assert!(w[1].counts.fn_ >= w[0].counts.fn_);
            assert!(w[1].counts.fp <= w[0].counts.fp);
        }
        let at_half = sweep_scores(&scores(&c, &test), &test, &[0.5]);
        let e = evaluate(&c, &test, 0.5, 0.99).unwrap();
        assert_eq!(at_half[0].counts, e.counts);
        let low = sweep_scores(&scores(&c, &test), &test, &[0.0]);
        assert_eq!(low[0].counts.fn_, 0);
    }
}
