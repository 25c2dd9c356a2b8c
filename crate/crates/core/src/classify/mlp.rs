//! Feedforward networks: forward pass, backpropagated gradients of the
//! output, Nguyen–Widrow initialization, batch Levenberg–Marquardt training
//! and sequential gradient-descent adaptation.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{ClassifyError, Features, Normalization};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tansig,
    Logsig,
    Relu,
    Softmax,
}

pub fn tansig(z: f64) -> f64 {
    2.0 / (1.0 + (-2.0 * z).exp()) - 1.0
}

pub fn logsig(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn activate(act: Activation, z: &DVector<f64>) -> DVector<f64> {
    match act {
        Activation::Tansig => z.map(tansig),
        Activation::Logsig => z.map(logsig),
        Activation::Relu => z.map(|v| v.max(0.0)),
        Activation::Softmax => {
            let m = z.max();
            let e = z.map(|v| (v - m).exp());
            let s = e.sum();
            e / s
        }
    }
}

/// Elementwise derivative for the hidden activations, from the
/// pre-activation `z` and output `a`.
fn derivative(act: Activation, z: f64, a: f64) -> f64 {
    match act {
        Activation::Tansig => 1.0 - a * a,
        Activation::Logsig => a * (1.0 - a),
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Softmax => unreachable!("softmax is an output activation"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `n_i × n_{i-1}`.
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub act: Activation,
}

/// Hidden sizes and activations of a network family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub hidden: Vec<usize>,
    pub hidden_act: Activation,
    pub output_act: Activation,
}

impl Arch {
    /// Three tansig hidden layers of ten, logsig output.
    pub fn dnn_s() -> Arch {
        Arch {
            hidden: vec![10, 10, 10],
            hidden_act: Activation::Tansig,
            output_act: Activation::Logsig,
        }
    }

    /// Three ReLU hidden layers of ten, two-unit softmax output.
    pub fn dnn_r() -> Arch {
        Arch {
            hidden: vec![10, 10, 10],
            hidden_act: Activation::Relu,
            output_act: Activation::Softmax,
        }
    }

    /// One tansig hidden layer of twenty, logsig output.
    pub fn snn() -> Arch {
        Arch {
            hidden: vec![20],
            hidden_act: Activation::Tansig,
            output_act: Activation::Logsig,
        }
    }

    pub fn output_size(&self) -> usize {
        if self.output_act == Activation::Softmax {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpFile", into = "MlpFile")]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub norm: Normalization,
    pub features: Features,
    pub theta: f64,
}

/// Serialized form: row-major weights per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpFile {
    arch: Vec<usize>,
    activations: Vec<Activation>,
    normalization: Normalization,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    theta: f64,
    features: Features,
}

impl From<Mlp> for MlpFile {
    fn from(m: Mlp) -> Self {
        let mut arch = vec![m.input_size()];
        arch.extend(m.layers.iter().map(|l| l.w.nrows()));
        MlpFile {
            arch,
            activations: m.layers.iter().map(|l| l.act).collect(),
            normalization: m.norm,
            weights: m
                .layers
                .iter()
                .map(|l| l.w.transpose().as_slice().to_vec())
                .collect(),
            biases: m.layers.iter().map(|l| l.b.as_slice().to_vec()).collect(),
            theta: m.theta,
            features: m.features,
        }
    }
}

impl TryFrom<MlpFile> for Mlp {
    type Error = ClassifyError;
    fn try_from(f: MlpFile) -> Result<Self, ClassifyError> {
        let bad = |m: String| ClassifyError::Shape(m);
        let l = f.activations.len();
        if f.arch.len() != l + 1 || f.weights.len() != l || f.biases.len() != l || l == 0 {
            return Err(bad("layer counts disagree".into()));
        }
        if f.arch[0] != f.features.len() || f.normalization.lo.len() != f.arch[0] {
            return Err(bad("input size disagrees with features".into()));
        }
        let mut layers = Vec::with_capacity(l);
        for i in 0..l {
            let (rows, cols) = (f.arch[i + 1], f.arch[i]);
            if rows == 0 || f.weights[i].len() != rows * cols || f.biases[i].len() != rows {
                return Err(bad(format!("layer {} has inconsistent dimensions", i + 1)));
            }
            if f.activations[i] == Activation::Softmax && i + 1 != l {
                return Err(bad("softmax only allowed on the output layer".into()));
            }
            layers.push(Layer {
                w: DMatrix::from_row_slice(rows, cols, &f.weights[i]),
                b: DVector::from_column_slice(&f.biases[i]),
                act: f.activations[i],
            });
        }
        let out = f.arch[l];
        let ok = match f.activations[l - 1] {
            Activation::Softmax => out == 2,
            _ => out == 1,
        };
        if !ok {
            return Err(bad("output layer must be one unit or a two-unit softmax".into()));
        }
        Ok(Mlp {
            layers,
            norm: f.normalization,
            features: f.features,
            theta: f.theta,
        })
    }
}

/// Per-layer activations kept for backpropagation.
struct Cache {
    z: Vec<DVector<f64>>,
    a: Vec<DVector<f64>>,
}

impl Mlp {
    /// Nguyen–Widrow initialization. Hidden rows are rescaled to norm
    /// `0.7·n_i^(1/n_{i-1})` with biases spread evenly over the same
    /// magnitude; the output layer is small uniform noise.
    pub fn init(
        arch: &Arch,
        features: Features,
        norm: Normalization,
        seed: u64,
    ) -> Result<Mlp, ClassifyError> {
        let n0 = features.len();
        if n0 == 0 || arch.hidden.contains(&0) {
            return Err(ClassifyError::Shape("layer sizes must be positive".into()));
        }
        let mut r = rng::rng(seed);
        let mut sizes = vec![n0];
        sizes.extend(&arch.hidden);
        sizes.push(arch.output_size());
        let l = sizes.len() - 1;
        let mut layers = Vec::with_capacity(l);
        for i in 1..=l {
            let (rows, cols) = (sizes[i], sizes[i - 1]);
            if i < l {
                let beta = 0.7 * (rows as f64).powf(1.0 / cols as f64);
                let mut w = DMatrix::<f64>::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0));
                for mut row in w.row_iter_mut() {
                    let norm = row.norm();
                    if norm > 0.0 {
                        row *= beta / norm;
                    }
                }
                let b = DVector::from_fn(rows, |j, _| {
                    let spread = if rows == 1 {
                        0.0
                    } else {
                        -1.0 + 2.0 * j as f64 / (rows - 1) as f64
                    };
                    beta * spread * w[(j, 0)].signum()
                });
                layers.push(Layer {
                    w,
                    b,
                    act: arch.hidden_act,
                });
            } else {
                layers.push(Layer {
                    w: DMatrix::from_fn(rows, cols, |_, _| r.random_range(-0.1..0.1)),
                    b: DVector::from_fn(rows, |_, _| r.random_range(-0.1..0.1)),
                    act: arch.output_act,
                });
            }
        }
        Ok(Mlp {
            layers,
            norm,
            features,
            theta: 0.5,
        })
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut v = vec![self.input_size()];
        v.extend(self.layers.iter().map(|l| l.w.nrows()));
        v
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameters flattened layer by layer, weights row-major then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            for r in 0..l.w.nrows() {
                for c in 0..l.w.ncols() {
                    p.push(l.w[(r, c)]);
                }
            }
            p.extend(l.b.iter());
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params());
        let mut k = 0;
        for l in &mut self.layers {
            for r in 0..l.w.nrows() {
                for c in 0..l.w.ncols() {
                    l.w[(r, c)] = p[k];
                    k += 1;
                }
            }
            for v in l.b.iter_mut() {
                *v = p[k];
                k += 1;
            }
        }
    }

    fn cache(&self, input: &[f64]) -> Cache {
        let mut z = Vec::with_capacity(self.layers.len());
        let mut a = Vec::with_capacity(self.layers.len() + 1);
        a.push(DVector::from_column_slice(input));
        for l in &self.layers {
            let zi = &l.w * a.last().expect("input") + &l.b;
            a.push(activate(l.act, &zi));
            z.push(zi);
        }
        Cache { z, a }
    }

    /// Output layer vector for a normalized input.
    pub fn output_layer(&self, input: &[f64]) -> DVector<f64> {
        let mut a = DVector::from_column_slice(input);
        for l in &self.layers {
            a = activate(l.act, &(&l.w * &a + &l.b));
        }
        a
    }

    /// `F` for a normalized input: the single output unit, or the
    /// positive-class component of a softmax pair.
    pub fn output(&self, input: &[f64]) -> f64 {
        let a = self.output_layer(input);
        a[a.len() - 1]
    }

    /// Writes `∂F/∂params` into `grad` (flattened like [`Mlp::params`]) and
    /// returns `F`.
    pub fn gradient(&self, input: &[f64], grad: &mut [f64]) -> f64 {
        let c = self.cache(input);
        let l = self.layers.len();
        let out = &c.a[l];
        let f = out[out.len() - 1];
        let mut delta = match self.layers[l - 1].act {
            Activation::Softmax => {
                let k = out.len() - 1;
                DVector::from_fn(out.len(), |j, _| f * (if j == k { 1.0 } else { 0.0 } - out[j]))
            }
            act => DVector::from_fn(out.len(), |j, _| derivative(act, c.z[l - 1][j], out[j])),
        };
        // offsets of each layer's block in the flattened vector
        let mut offsets = Vec::with_capacity(l);
        let mut k = 0;
        for layer in &self.layers {
            offsets.push(k);
            k += layer.w.len() + layer.b.len();
        }
        for i in (0..l).rev() {
            let layer = &self.layers[i];
            let prev = &c.a[i];
            let (rows, cols) = layer.w.shape();
            let base = offsets[i];
            for r in 0..rows {
                let d = delta[r];
                let row = &mut grad[base + r * cols..base + (r + 1) * cols];
                for (g, p) in row.iter_mut().zip(prev.iter()) {
                    *g = d * p;
                }
                grad[base + rows * cols + r] = d;
            }
            if i > 0 {
                let back = layer.w.tr_mul(&delta);
                let act = self.layers[i - 1].act;
                delta = DVector::from_fn(cols, |j, _| back[j] * derivative(act, c.z[i - 1][j], prev[j]));
            }
        }
        f
    }

    /// Normalized feature vector of a state.
    pub fn input(&self, s: &crate::model::State) -> Vec<f64> {
        let mut x = self.features.extract(s);
        self.norm.apply(&mut x);
        x
    }

    pub fn score_state(&self, s: &crate::model::State) -> f64 {
        self.output(&self.input(s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub max_epochs: usize,
    pub mu: f64,
    pub mu_inc: f64,
    pub mu_dec: f64,
    pub mu_max: f64,
    /// Training stops once an epoch improves the MSE by less than this.
    pub tol: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            max_epochs: 1000,
            mu: 1e-3,
            mu_inc: 10.0,
            mu_dec: 0.1,
            mu_max: 1e10,
            tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Tolerance,
    MuMax,
    EmptyData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    /// Training MSE before the first epoch and after each accepted one.
    pub loss: Vec<f64>,
    pub stop: StopReason,
}

fn mse(net: &Mlp, inputs: &[Vec<f64>], targets: &[f64]) -> f64 {
    let s: f64 = inputs
        .iter()
        .zip(targets)
        .map(|(x, t)| {
            let e = net.output(x) - t;
            e * e
        })
        .sum();
    s / inputs.len() as f64
}

/// Batch Levenberg–Marquardt on the residuals `F(x_j) − b_j`.
pub fn train_lm(net: &mut Mlp, inputs: &[Vec<f64>], targets: &[f64], cfg: &LmConfig) -> TrainReport {
    let n = inputs.len();
    if n == 0 {
        return TrainReport {
            epochs: 0,
            loss: Vec::new(),
            stop: StopReason::EmptyData,
        };
    }
    let p = net.n_params();
    let mut w = net.params();
    let mut loss = vec![mse(net, inputs, targets)];
    let mut mu = cfg.mu;
    let mut j = DMatrix::<f64>::zeros(n, p);
    let mut e = DVector::<f64>::zeros(n);
    let mut row = vec![0.0; p];
    let mut stop = StopReason::MaxEpochs;
    let mut epochs = 0;

    'epochs: for _ in 0..cfg.max_epochs {
        for (i, (x, t)) in inputs.iter().zip(targets).enumerate() {
            let f = net.gradient(x, &mut row);
            e[i] = f - t;
            for (c, v) in row.iter().enumerate() {
                j[(i, c)] = *v;
            }
        }
        let jtj = j.tr_mul(&j);
        let g = j.tr_mul(&e);
        let current = *loss.last().expect("initial loss");
        loop {
            let mut a = jtj.clone();
            for d in 0..p {
                a[(d, d)] += mu;
            }
            let step = nalgebra::linalg::Cholesky::new(a).map(|ch| -ch.solve(&g));
            if let Some(step) = step {
                let trial: Vec<f64> = w.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                net.set_params(&trial);
                let m = mse(net, inputs, targets);
                if m < current {
                    debug_assert!(m <= current);
                    w = trial;
                    mu = (mu * cfg.mu_dec).max(f64::MIN_POSITIVE);
                    loss.push(m);
                    epochs += 1;
                    if current - m < cfg.tol {
                        stop = StopReason::Tolerance;
                        break 'epochs;
                    }
                    continue 'epochs;
                }
            }
            mu *= cfg.mu_inc;
            if mu > cfg.mu_max {
                net.set_params(&w);
                stop = StopReason::MuMax;
                break 'epochs;
            }
        }
    }
    net.set_params(&w);
    TrainReport { epochs, loss, stop }
}

/// One sequential gradient-descent pass over `(input, target)` pairs on
/// the per-sample loss `(F − b)²`.
pub fn adapt_pass(net: &mut Mlp, inputs: &[Vec<f64>], targets: &[f64], lr: f64) {
    if lr == 0.0 {
        return;
    }
    let mut grad = vec![0.0; net.n_params()];
    let mut w = net.params();
    for (x, t) in inputs.iter().zip(targets) {
        let f = net.gradient(x, &mut grad);
        let scale = 2.0 * (f - t) * lr;
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= scale * gi;
        }
        net.set_params(&w);
    }
}
