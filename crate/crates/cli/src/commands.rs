use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde_json::{json, Value};

use nsc_core::classify::{self, Classifier, StateClassifier};
use nsc_core::eval::{self, SprtKind};
use nsc_core::falsify;
use nsc_core::model::HybridAutomaton;
use nsc_core::rng::{self, derive_seed, streams};
use nsc_core::sampling::{self, Sample, SampleSet};
use nsc_core::sim::{self, IntegratorConfig, Record, SimOptions, Simulator, TransitionPolicy};

use crate::config::{existing, ConfigError, ExperimentConfig};
use crate::plot::{heatmap, LinePlot, Series};
use crate::{
    AdaptArgs, CertifyArgs, Command, EvalArgs, FalsifyArgs, GenerateArgs, Policy, Property, ReverseCheckArgs, Run,
    SimulateArgs, SweepArchArgs, SweepThresholdArgs, TrainArgs,
};

/// Folds command flags into the config so the config hash covers them.
pub fn apply_overrides(cfg: &mut ExperimentConfig, command: &Command) {
    match command {
        Command::Generate(a) => {
            if let Some(s) = &a.strategy {
                cfg.strategy = s.clone();
            }
            if let Some(n) = a.n {
                cfg.train_n = n;
            }
            if let Some(p) = &a.params {
                cfg.sampling.active_params = p.clone();
            }
        }
        Command::Train(a) => {
            if let Some(f) = &a.family {
                cfg.classifier = f.clone();
            }
            if let Some(t) = a.theta {
                cfg.theta = t;
            }
            if let Some(e) = a.epochs {
                cfg.train.lm.max_epochs = e;
            }
        }
        Command::Certify(a) => {
            if let Some(l) = a.level {
                match a.property {
                    Property::Accuracy => cfg.sprt.theta_accuracy = l,
                    Property::FnRate => cfg.sprt.theta_fn = l,
                }
            }
        }
        Command::Falsify(a) => {
            if let Some(p) = a.population {
                cfg.ga.population = p;
            }
            if let Some(g) = a.generations {
                cfg.ga.generations = g;
            }
        }
        Command::Adapt(a) => {
            if let Some(m) = a.max_iters {
                cfg.adapt.max_iters = m;
            }
        }
        Command::SweepThreshold(a) => {
            if let Some(p) = a.points {
                cfg.sweep.points = p;
            }
        }
        Command::SweepArch(a) => {
            if let Some(f) = &a.family {
                cfg.classifier = f.clone();
            }
            if let Some(l) = &a.layers {
                cfg.sweep.layers = l.clone();
            }
            if let Some(n) = &a.neurons {
                cfg.sweep.neurons = n.clone();
            }
        }
        Command::Eval(_) | Command::Simulate(_) | Command::ReverseCheck(_) => {}
    }
}

pub fn dispatch(r: &mut Run, command: &Command) -> Result<Value> {
    match command {
        Command::Generate(a) => generate(r, a),
        Command::Train(a) => train(r, a),
        Command::Eval(a) => evaluate(r, a),
        Command::Certify(a) => certify(r, a),
        Command::Falsify(a) => run_falsify(r, a),
        Command::Adapt(a) => adapt(r, a),
        Command::SweepThreshold(a) => sweep_threshold(r, a),
        Command::SweepArch(a) => sweep_arch(r, a),
        Command::Simulate(a) => simulate(r, a),
        Command::ReverseCheck(a) => reverse_check(r, a),
    }
}

/// Reads a classifier written by `train` or `adapt`, or a bare
/// classifier JSON.
pub fn load_classifier(path: &Path, ha: &HybridAutomaton) -> Result<Classifier> {
    let text = std::fs::read_to_string(existing(path)?).with_context(|| format!("reading {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let inner = match v {
        Value::Object(mut m) if m.contains_key("classifier") => m.remove("classifier").expect("key present"),
        other => other,
    };
    let c: Classifier = serde_json::from_value(inner).with_context(|| format!("decoding classifier {}", path.display()))?;
    c.check_model(ha)?;
    Ok(c)
}

fn load_data(path: &Path, ha: &HybridAutomaton) -> Result<SampleSet> {
    sampling::load_dataset(ha, existing(path)?).with_context(|| format!("reading dataset {}", path.display()))
}

fn dataset_csv(ha: &HybridAutomaton, ds: &SampleSet) -> Result<String> {
    let mut buf = Vec::new();
    sampling::write_dataset(ha, ds, &mut buf)?;
    Ok(String::from_utf8(buf).expect("dataset CSV is UTF-8"))
}

fn counts(ds: &SampleSet) -> Value {
    let (neg, pos) = ds.counts();
    json!({ "n": ds.len(), "negatives": neg, "positives": pos })
}

fn generate(r: &mut Run, a: &GenerateArgs) -> Result<Value> {
    let ha = r.cfg.model()?;
    let strategy = sampling::strategy(&r.cfg.strategy)?;
    let ds = strategy.sample(&ha, r.cfg.train_n, &r.cfg.sampling, r.seed())?;
    let path = r.path(a.out.as_deref(), &format!("{}_{}_{}.csv", ha.name, r.cfg.strategy, r.cfg.train_n));
    r.write_csv(&path, &dataset_csv(&ha, &ds)?)?;
    Ok(counts(&ds))
}

fn train(r: &mut Run, a: &TrainArgs) -> Result<Value> {
    let ha = r.cfg.model()?;
    let data = load_data(&a.data, &ha)?;
    let trainer = classify::trainer(&r.cfg.classifier)?;
    let mut tc = r.cfg.train.clone();
    tc.theta = r.cfg.theta;
    let (c, report) = trainer.train(&ha, &data, &tc)?;
    let path = r.path(a.out.as_deref(), &format!("{}_{}.json", ha.name, r.cfg.classifier));
    r.write_json(
        &path,
        json!({ "data": a.data, "classifier": c, "train_report": report }),
    )?;
    let mut summary = json!({ "family": r.cfg.classifier, "train": counts(&data) });
    if let Some(rep) = &report {
        let plot = LinePlot {
            title: format!("{} training on {}", r.cfg.classifier, ha.name),
            x_label: "epoch".into(),
            y_label: "MSE (log10)".into(),
            series: vec![Series {
                name: "train MSE".into(),
                points: rep.loss.iter().enumerate().map(|(i, &l)| (i as f64, l)).collect(),
            }],
            log_y: true,
        };
        let svg = path.with_extension("loss.svg");
        r.write_svg(&svg, &plot.to_svg())?;
        summary["epochs"] = json!(rep.epochs);
        summary["final_mse"] = json!(rep.loss.last());
        summary["stop"] = json!(rep.stop);
    }
    Ok(summary)
}

fn evaluate(r: &mut Run, a: &EvalArgs) -> Result<Value> {
    let ha = r.cfg.model()?;
    let c = load_classifier(&a.classifier, &ha)?;
    let test = load_data(&a.data, &ha)?;
    let theta = a.theta.unwrap_or_else(|| c.threshold());
    let rep = eval::evaluate(&c, &test, theta, r.cfg.confidence)?;
    let path = r.path(a.out.as_deref(), "eval.json");
    r.write_json(
        &path,
        json!({ "classifier": a.classifier, "data": a.data, "report": rep }),
    )?;
    Ok(json!({
        "accuracy": rep.accuracy.value,
        "fn_rate": rep.fn_rate.value,
        "fp_rate": rep.fp_rate.value,
        "counts": rep.counts,
    }))
}

/// Stream item for the tested property: "prediction correct" for
/// accuracy, "false negative occurred" for the FN rate.
fn outcome(c: &Classifier, s: &Sample, theta: f64, property: Property) -> bool {
    let predicted = c.classify_at(&s.state, theta);
    let actual = s.label.is_positive();
    match property {
        Property::Accuracy => predicted == actual,
        Property::FnRate => actual && !predicted,
    }
}

fn certify(r: &mut Run, a: &CertifyArgs) -> Result<Value> {
    let ha = r.cfg.model()?;
    let c = load_classifier(&a.classifier, &ha)?;
    let theta = a.theta.unwrap_or_else(|| c.threshold());
    let sp = r.cfg.sprt.clone();
    let (kind, level) = match a.property {
        Property::Accuracy => (SprtKind::AccuracyAtLeast, sp.theta_accuracy),
        Property::FnRate => (SprtKind::RateAtMost, sp.theta_fn),
    };
    let test = |stream: &mut dyn Iterator<Item = bool>| eval::sprt(stream, kind, level, sp.delta, sp.alpha, sp.beta, sp.max_samples);
    let (res, source) = match &a.data {
        Some(p) => {
            let ds = load_data(p, &ha)?;
            let mut stream = ds.samples.iter().map(|s| outcome(&c, s, theta, a.property));
            (test(&mut stream)?, json!({ "file": p }))
        }
        None => {
            let strategy = sampling::strategy(&r.cfg.test_strategy)?;
            let mut failure = None;
            let res = {
                let mut stream = (0u64..)
                    .map_while(|k| {
                        let seed = derive_seed(r.cfg.seed, streams::CERTIFY, k);
                        match strategy.sample(&ha, sp.batch, &r.cfg.sampling, seed) {
                            Ok(ds) => Some(ds),
                            Err(e) => {
                                failure = Some(e);
                                None
                            }
                        }
                    })
                    .flat_map(|ds| ds.samples.into_iter().map(|s| outcome(&c, &s, theta, a.property)));
                test(&mut stream)?
            };
            if let Some(e) = failure {
                return Err(e).context("drawing certification samples");
            }
            (res, json!({ "strategy": r.cfg.test_strategy, "batch": sp.batch }))
        }
    };
    let path = r.path(a.out.as_deref(), "certify.json");
    r.write_json(
        &path,
        json!({
            "classifier": a.classifier,
            "property": a.property,
            "threshold": theta,
            "stream": source,
            "sprt": res,
        }),
    )?;
    Ok(json!({ "decision": res.decision, "samples": res.m, "successes": res.successes }))
}

fn state_json(ha: &HybridAutomaton, s: &nsc_core::State) -> Value {
    json!({ "mode": ha.modes[s.mode].id, "x": s.x, "p": s.p })
}

fn run_falsify(r: &mut Run, a: &FalsifyArgs) -> Result<Value> {
    let ha = r.cfg.model()?;
    let c = load_classifier(&a.classifier, &ha)?;
    let theta = a.theta.unwrap_or_else(|| c.threshold());
    let f = falsify::ga_falsify(&c, &ha, &r.cfg.sampling.oracle, theta, None, &r.cfg.ga)?;
    let tagged: Vec<_> = f.fns.iter().cloned().map(|s| (0, s)).collect();
    let csv = r.path(a.out.as_deref(), "falsify_fns.csv");
    r.write_csv(&csv, &dataset_csv(&ha, &falsify::fn_dump(&ha, &tagged))?)?;
    let report = csv.with_extension("json");
    r.write_json(
        &report,
        json!({
            "classifier": a.classifier,
            "threshold": theta,
            "fn_found": f.fns.len(),
            "fns": f.fns.iter().map(|s| state_json(&ha, s)).collect::<Vec<_>>(),
            "stats": f.stats,
        }),
    )?;
    let plot = LinePlot {
        title: format!("falsifier on {}", ha.name),
        x_label: "generation".into(),
        y_label: "best objective (log10)".into(),
        series: vec![Series {
            name: "best".into(),
            points: f.stats.best.iter().enumerate().map(|(i, &o)| (i as f64, o)).collect(),
        }],
        log_y: true,
    };
    r.write_svg(&csv.with_extension("svg"), &plot.to_svg())?;
    Ok(json!({
        "fn_found": f.fns.len(),
        "oracle_calls": f.stats.oracle_calls,
        "fp_found": f.stats.fp_found,
    }))
}

fn adapt(r: &mut Run, a: &AdaptArgs) -> Result<Value> {
    let ha = r.cfg.model()?;
    let c = load_classifier(&a.classifier, &ha)?;
    let train = load_data(&a.train, &ha)?;
    let test = match &a.test {
        Some(p) => load_data(p, &ha)?,
        None => SampleSet {
            model: ha.name.clone(),
            samples: Vec::new(),
        },
    };
    let ad = falsify::adaptation_loop(&c, &ha, &train, &test, &r.cfg.sampling.oracle, &r.cfg.ga, &r.cfg.adapt)?;
    let path = r.path(a.out.as_deref(), "adapted.json");
    r.write_json(
        &path,
        json!({ "source": a.classifier, "classifier": ad.classifier, "trace": ad.trace }),
    )?;

    let mut buf = Vec::new();
    ad.trace.write_csv(&mut buf)?;
    r.write_csv(&path.with_extension("trace.csv"), &String::from_utf8(buf)?)?;
    r.write_csv(&path.with_extension("fns.csv"), &dataset_csv(&ha, &falsify::fn_dump(&ha, &ad.fns))?)?;

    let rows = &ad.trace.rows;
    let found = LinePlot {
        title: format!("adaptation on {}", ha.name),
        x_label: "iteration".into(),
        y_label: "FNs found".into(),
        series: vec![Series {
            name: "falsifier FNs".into(),
            points: rows.iter().skip(1).map(|t| (t.iteration as f64, t.fn_found as f64)).collect(),
        }],
        log_y: false,
    };
    r.write_svg(&path.with_extension("fns.svg"), &found.to_svg())?;
    if !test.is_empty() {
        let rates = LinePlot {
            title: format!("test rates during adaptation on {}", ha.name),
            x_label: "iteration".into(),
            y_label: "rate".into(),
            series: vec![
                Series {
                    name: "FN rate".into(),
                    points: rows.iter().map(|t| (t.iteration as f64, t.fn_rate)).collect(),
                },
                Series {
                    name: "FP rate".into(),
                    points: rows.iter().map(|t| (t.iteration as f64, t.fp_rate)).collect(),
                },
            ],
            log_y: false,
        };
        r.write_svg(&path.with_extension("rates.svg"), &rates.to_svg())?;
    }
    Ok(json!({
        "converged": ad.trace.converged,
        "iterations": rows.len().saturating_sub(1),
        "fn_total": ad.fns.len(),
    }))
}

fn sweep_threshold(r: &mut Run, a: &SweepThresholdArgs) -> Result<Value> {
    let ha = r.cfg.model()?;
    let c = load_classifier(&a.classifier, &ha)?;
    let test = load_data(&a.data, &ha)?;
    let grid = eval::theta_grid(r.cfg.sweep.points);
    let points = eval::threshold_sweep(&c, &test, &grid)?;

    let mut csv = String::from("theta,tp,tn,fp,fn,accuracy,fn_rate,fp_rate\n");
    for p in &points {
        let k = p.counts;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            p.theta, k.tp, k.tn, k.fp, k.fn_, p.accuracy, p.fn_rate, p.fp_rate
        ));
    }
    let base = r.path(None, "threshold_sweep.csv");
    r.write_csv(&base, &csv)?;

    let reference = eval::evaluate(&c, &test, c.threshold(), r.cfg.confidence)?;
    // largest threshold on the grid with no test false negatives
    let zero_fn = points.iter().rev().find(|p| p.counts.fn_ == 0);
    let zero_fn = zero_fn.map(|p| {
        json!({
            "theta": p.theta,
            "accuracy": p.accuracy,
            "accuracy_loss": reference.accuracy.value - p.accuracy,
        })
    });
    r.write_json(
        &base.with_extension("json"),
        json!({
            "classifier": a.classifier,
            "data": a.data,
            "reference": reference,
            "zero_fn": zero_fn,
            "points": points,
        }),
    )?;
    let series = |name: &str, f: fn(&eval::SweepPoint) -> f64| Series {
        name: name.into(),
        points: points.iter().map(|p| (p.theta, f(p))).collect(),
    };
    let plot = LinePlot {
        title: format!("threshold sweep on {}", ha.name),
        x_label: "threshold".into(),
        y_label: "rate".into(),
        series: vec![
            series("accuracy", |p| p.accuracy),
            series("FN rate", |p| p.fn_rate),
            series("FP rate", |p| p.fp_rate),
        ],
        log_y: false,
    };
    r.write_svg(&base.with_extension("svg"), &plot.to_svg())?;
    Ok(json!({ "points": points.len(), "zero_fn": zero_fn }))
}

fn sweep_arch(r: &mut Run, a: &SweepArchArgs) -> Result<Value> {
    let ha = r.cfg.model()?;
    let train = load_data(&a.train, &ha)?;
    let test = load_data(&a.test, &ha)?;
    let trainer = classify::trainer(&r.cfg.classifier)?;
    let mut tc = r.cfg.train.clone();
    tc.theta = r.cfg.theta;
    let sw = eval::arch_sweep(&ha, trainer.as_ref(), &train, &test, &r.cfg.sweep.layers, &r.cfg.sweep.neurons, &tc)?;
    let base = r.path(None, "arch_sweep.csv");
    r.write_csv(&base, &sw.to_csv())?;
    r.write_json(&base.with_extension("json"), json!({ "sweep": sw }))?;
    let cols: Vec<String> = sw.neurons.iter().map(|n| n.to_string()).collect();
    let rows: Vec<String> = sw.layers.iter().map(|l| l.to_string()).collect();
    let svg = heatmap(
        &format!("{} test accuracy on {}", r.cfg.classifier, ha.name),
        "neurons per layer",
        "hidden layers",
        &cols,
        &rows,
        &sw.accuracy,
    );
    r.write_svg(&base.with_extension("svg"), &svg)?;
    Ok(json!({ "accuracy": sw.accuracy, "failures": sw.failures.len() }))
}

fn simulate(r: &mut Run, a: &SimulateArgs) -> Result<Value> {
    let fwd = r.cfg.model()?;
    let ha = if a.reverse { fwd.reverse()? } else { fwd };
    let mode = match &a.mode {
        Some(id) => ha
            .mode_index(id)
            .ok_or_else(|| ConfigError(format!("model {} has no mode '{id}'", ha.name)))?,
        None => 0,
    };
    if a.x.len() != ha.dim() {
        bail!(ConfigError(format!(
            "model {} has {} variable(s) ({}); got {} value(s)",
            ha.name,
            ha.dim(),
            ha.variables.join(", "),
            a.x.len()
        )));
    }
    let s = ha.state(mode, a.x.clone());
    let horizon = a.horizon.unwrap_or(ha.time_bound);
    let policy = match a.policy {
        Policy::Deterministic => TransitionPolicy::Deterministic,
        Policy::RandomWalk => TransitionPolicy::RandomWalk,
    };
    let sim = Simulator::new(&ha, &r.cfg.sampling.oracle.integrator);
    let opts = SimOptions {
        stop_on_unsafe: false,
        record: Record::Steps,
    };
    let traj = sim.run(&s, horizon, policy, opts, r.seed())?;

    let base = r.path(None, "trajectory.csv");
    let mut buf = Vec::new();
    traj.write_csv(&ha, &mut buf)?;
    r.write_csv(&base, &String::from_utf8(buf)?)?;

    let jumps: Vec<Value> = traj
        .jumps
        .iter()
        .map(|j| {
            let t = &ha.transitions[j.transition];
            json!({
                "time": j.time,
                "from": ha.modes[t.source].id,
                "to": ha.modes[t.target].id,
                "pre": j.pre,
                "post": j.post,
            })
        })
        .collect();
    let end = traj.end_state();
    let reaches_unsafe = traj.segments.iter().any(|seg| {
        seg.states.iter().any(|x| {
            ha.in_unsafe(&nsc_core::State {
                mode: seg.mode,
                x: x.clone(),
                p: traj.params.clone(),
            })
        })
    });
    let body = json!({
        "start": state_json(&ha, &s),
        "horizon": horizon,
        "reverse": a.reverse,
        "status": traj.status,
        "jumps": jumps,
        "end": state_json(&ha, &end),
        "end_time": traj.end_time(),
        "unsafe_on_recorded_steps": reaches_unsafe,
    });
    r.write_json(&base.with_extension("json"), body)?;

    let series = ha
        .variables
        .iter()
        .enumerate()
        .map(|(k, v)| Series {
            name: v.clone(),
            points: traj
                .segments
                .iter()
                .flat_map(|seg| seg.times.iter().zip(&seg.states).map(move |(t, x)| (*t, x[k])))
                .collect(),
        })
        .collect();
    let plot = LinePlot {
        title: format!("{} from mode {}", ha.name, ha.modes[mode].id),
        x_label: "time".into(),
        y_label: "state".into(),
        series,
        log_y: false,
    };
    r.write_svg(&base.with_extension("svg"), &plot.to_svg())?;
    Ok(json!({ "status": traj.status, "jumps": traj.jumps.len(), "end": state_json(&ha, &end) }))
}

fn reverse_check(r: &mut Run, a: &ReverseCheckArgs) -> Result<Value> {
    let ha = r.cfg.model()?;
    let horizon = a.horizon.unwrap_or(ha.time_bound);
    let budget = r.cfg.sampling.budget;
    let states = (0..a.n)
        .map(|i| {
            let mut g = rng::rng(derive_seed(r.seed(), streams::UNIFORM, i as u64));
            sampling::draw_state(&ha, ha.default_params(), &mut g, budget)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let precise = IntegratorConfig::precise();
    let results: Vec<Result<f64, sim::SimError>> = states
        .par_iter()
        .map(|s| sim::reverse_roundtrip_check(&ha, s, horizon, &precise))
        .collect();

    let mut csv = String::from("index,mode");
    for v in &ha.variables {
        csv.push_str(&format!(",{v}"));
    }
    csv.push_str(",distance,error\n");
    let mut worst = 0.0f64;
    let (mut sum, mut ok) = (0.0, 0usize);
    let mut failures = Vec::new();
    for (i, (s, res)) in states.iter().zip(&results).enumerate() {
        csv.push_str(&format!("{i},{}", ha.modes[s.mode].id));
        for v in &s.x {
            csv.push_str(&format!(",{v:?}"));
        }
        match res {
            Ok(d) => {
                worst = worst.max(*d);
                sum += d;
                ok += 1;
                csv.push_str(&format!(",{d:e},\n"));
            }
            Err(e) => {
                let msg = e.to_string();
                csv.push_str(&format!(",,\"{}\"\n", msg.replace('"', "'")));
                failures.push(json!({ "index": i, "error": msg }));
            }
        }
    }
    let base = r.path(None, "reverse_check.csv");
    r.write_csv(&base, &csv)?;
    let mean = if ok > 0 { sum / ok as f64 } else { f64::NAN };
    let summary = json!({
        "n": a.n,
        "horizon": horizon,
        "checked": ok,
        "worst": worst,
        "mean": if mean.is_finite() { json!(mean) } else { Value::Null },
        "failures": failures,
    });
    r.write_json(&base.with_extension("json"), summary.clone())?;
    Ok(summary)
}
