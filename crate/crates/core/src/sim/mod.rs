//! Hybrid simulation: adaptive Dormand–Prince integration of mode flows
//! with guard, unsafe-set and invariant event localization; the forward
//! reachability oracle; backward sampling through the reverse automaton;
//! and the forward/backward round-trip check.

pub mod dopri;

use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{CmpOp, EvalError, Expr};
use crate::model::{HybridAutomaton, ModelError, Reset, State};
use crate::rng::{self, derive_seed, streams};

use dopri::{Dense, Rhs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Largest step; `None` means `T / 100`.
    pub max_step: Option<f64>,
    /// Width of the time bracket events are localized to.
    pub event_tol: f64,
    /// Jump cutoff; `None` uses the model's `jump_bound`.
    pub max_jumps: Option<usize>,
    /// Any coordinate beyond this magnitude aborts the run as divergent.
    pub state_bound: f64,
    pub max_steps: usize,
    /// Relative tolerance on guard residuals when replaying jumps.
    pub guard_tol: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rel_tol: 1e-6,
            abs_tol: 1e-8,
            max_step: None,
            event_tol: 1e-9,
            max_jumps: None,
            state_bound: 1e6,
            max_steps: 500_000,
            guard_tol: 1e-5,
        }
    }
}

impl IntegratorConfig {
    /// Tight tolerances for round-trip checks.
    pub fn precise() -> Self {
        IntegratorConfig {
            rel_tol: 1e-11,
            abs_tol: 1e-12,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionPolicy {
    /// Take the single enabled transition at the earliest event; more than
    /// one enabled transition is an error.
    Deterministic,
    /// Uniform choice among the enabled transitions (plus staying in the
    /// mode when the automaton is not urgent and the invariant allows it).
    RandomWalk,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Record {
    /// Only segment start and end points.
    Endpoints,
    /// Every accepted step.
    Steps,
    /// Points on a fixed global time grid.
    Grid(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub stop_on_unsafe: bool,
    pub record: Record,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            stop_on_unsafe: true,
            record: Record::Endpoints,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite derivative at t={t}: {source}")]
    NonFiniteDerivative { t: f64, source: EvalError },
    #[error("step size underflow at t={t}")]
    StepUnderflow { t: f64 },
    #[error("state diverged beyond bound at t={t}")]
    Diverged { t: f64 },
    #[error("step budget exhausted at t={t}")]
    TooManySteps { t: f64 },
    #[error("{count} transitions enabled at t={t} under the deterministic policy")]
    Nondeterministic { t: f64, count: usize },
    #[error("predicate evaluation failed at t={t}: {source}")]
    Eval { t: f64, source: EvalError },
    #[error("mirrored transition {transition} not enabled at t={t} (residual {residual:e})")]
    ReversalInconsistency {
        t: f64,
        transition: usize,
        residual: f64,
    },
    #[error("forward run did not complete: {0:?}")]
    Incomplete(Status),
    #[error("backward sampling failed after {0} attempts")]
    BackwardBudget(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Completed,
    HitUnsafe(f64),
    Blocked(f64),
    JumpBudgetExhausted(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn from_bool(b: bool) -> Label {
        if b {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn as_f64(self) -> f64 {
        if self.is_positive() {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub mode: usize,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Jump {
    pub time: f64,
    pub transition: usize,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub segments: Vec<Segment>,
    pub jumps: Vec<Jump>,
    pub status: Status,
    pub params: Vec<f64>,
}

impl Trajectory {
    /// Switching times `ξ₀ = 0, ξ₁, …, ξ_k` where `ξ_k` is the end time.
    pub fn switching_times(&self) -> Vec<f64> {
        let mut v = vec![0.0];
        v.extend(self.jumps.iter().map(|j| j.time));
        v.push(self.end_time());
        v
    }

    pub fn end_time(&self) -> f64 {
        self.segments
            .last()
            .and_then(|s| s.times.last().copied())
            .unwrap_or(0.0)
    }

    pub fn end_state(&self) -> State {
        let seg = self.segments.last().expect("trajectory has a segment");
        State {
            mode: seg.mode,
            x: seg.states.last().cloned().unwrap_or_default(),
            p: self.params.clone(),
        }
    }

    /// Writes `t,mode,x1..xn` rows.
    pub fn write_csv<W: Write>(&self, ha: &HybridAutomaton, mut w: W) -> std::io::Result<()> {
        write!(w, "t,mode")?;
        for v in &ha.variables {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
        for seg in &self.segments {
            for (t, x) in seg.times.iter().zip(&seg.states) {
                write!(w, "{t},{}", ha.modes[seg.mode].id)?;
                for v in x {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

struct Flow<'a> {
    exprs: &'a [Expr],
    env: Vec<f64>,
}

impl Rhs for Flow<'_> {
    type Error = EvalError;
    fn eval(&mut self, x: &[f64], dx: &mut [f64]) -> Result<(), EvalError> {
        self.env[..x.len()].copy_from_slice(x);
        for (d, e) in dx.iter_mut().zip(self.exprs) {
            *d = e.eval(&self.env)?;
        }
        Ok(())
    }
}

/// How a guard's first satisfaction is detected.
#[derive(Debug, Clone)]
enum Trigger {
    /// Rising edge of the boolean guard.
    Level,
    /// Sign change of `lhs - rhs` of an equality conjunct; the remaining
    /// conjuncts must hold at the crossing.
    Crossing { diff: Expr, rest: Vec<Expr> },
}

fn trigger_of(guard: &Expr) -> Trigger {
    let conj = guard.conjuncts();
    if let Some(pos) = conj
        .iter()
        .position(|c| matches!(c, Expr::Cmp(CmpOp::Eq, _, _)))
    {
        let Expr::Cmp(_, a, b) = conj[pos] else {
            unreachable!()
        };
        let diff = Expr::bin(crate::expr::BinOp::Sub, (**a).clone(), (**b).clone());
        let rest = conj
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != pos)
            .map(|(_, c)| (*c).clone())
            .collect();
        Trigger::Crossing { diff, rest }
    } else {
        Trigger::Level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Watch {
    Unsafe,
    Guard(usize),
    Barrier(usize),
    Invariant,
}

/// Reusable simulation context for one automaton.
pub struct Simulator<'a> {
    ha: &'a HybridAutomaton,
    triggers: Vec<Trigger>,
    barriers: Vec<Trigger>,
    cfg: IntegratorConfig,
}

struct Probe {
    env: Vec<f64>,
    n: usize,
}

impl Probe {
    fn set(&mut self, x: &[f64]) -> &[f64] {
        self.env[..self.n].copy_from_slice(x);
        &self.env
    }
}

fn edge(trigger: &Trigger, base: f64, now: f64) -> bool {
    match trigger {
        Trigger::Level => base == 0.0 && now != 0.0,
        Trigger::Crossing { .. } => {
            let (a, b) = (sign(base), sign(now));
            a != 0 && a != b
        }
    }
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

impl<'a> Simulator<'a> {
    pub fn new(ha: &'a HybridAutomaton, cfg: &IntegratorConfig) -> Self {
        Simulator {
            ha,
            triggers: ha.transitions.iter().map(|t| trigger_of(&t.guard)).collect(),
            barriers: ha.barriers.iter().map(|b| trigger_of(&b.guard)).collect(),
            cfg: cfg.clone(),
        }
    }

    pub fn model(&self) -> &HybridAutomaton {
        self.ha
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.cfg
    }

    fn max_jumps(&self) -> usize {
        self.cfg.max_jumps.unwrap_or(self.ha.jump_bound)
    }

    fn outgoing(&self, mode: usize) -> Vec<usize> {
        self.ha
            .transitions
            .iter()
            .enumerate()
            .filter(|(_, t)| t.source == mode)
            .map(|(i, _)| i)
            .collect()
    }

    fn reset_feasible(&self, tr: usize, env: &[f64]) -> Result<bool, EvalError> {
        for r in &self.ha.transitions[tr].resets {
            if let Some(iv) = r.interval(env) {
                let (lo, hi) = iv?;
                if lo > hi {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    fn apply_reset(
        &self,
        tr: usize,
        x: &[f64],
        env: &[f64],
        rng: &mut rng::Rng,
    ) -> Result<Vec<f64>, EvalError> {
        self.ha.transitions[tr]
            .resets
            .iter()
            .zip(x)
            .map(|(r, &xi)| {
                let choice = if matches!(r, Reset::Interval { .. }) {
                    rng.random::<f64>()
                } else {
                    0.0
                };
                r.apply(xi, env, choice)
            })
            .collect()
    }

    /// Raw watcher value: 1/0 for predicates, the difference for crossings.
    fn watch_value(&self, w: Watch, mode: usize, env: &[f64]) -> Result<f64, EvalError> {
        match w {
            Watch::Unsafe => self.ha.unsafe_set.eval(env),
            Watch::Invariant => self.ha.modes[mode].invariant.eval(env),
            Watch::Guard(i) => match &self.triggers[i] {
                Trigger::Level => self.ha.transitions[i].guard.eval(env),
                Trigger::Crossing { diff, .. } => diff.eval(env),
            },
            Watch::Barrier(i) => match &self.barriers[i] {
                Trigger::Level => self.ha.barriers[i].guard.eval(env),
                Trigger::Crossing { diff, .. } => diff.eval(env),
            },
        }
    }

    fn triggered(&self, w: Watch, base: f64, now: f64) -> bool {
        match w {
            Watch::Unsafe => base == 0.0 && now != 0.0,
            Watch::Invariant => base != 0.0 && now == 0.0,
            Watch::Guard(i) => edge(&self.triggers[i], base, now),
            Watch::Barrier(i) => edge(&self.barriers[i], base, now),
        }
    }

    /// Whether a barrier hit at an event blocks the run: crossings count
    /// only where the guard's other conjuncts hold.
    fn barrier_blocks(&self, hits: &[Watch], env: &[f64]) -> Result<bool, EvalError> {
        for w in hits {
            if let Watch::Barrier(i) = *w {
                let blocks = match &self.barriers[i] {
                    Trigger::Level => true,
                    Trigger::Crossing { rest, .. } => {
                        let mut ok = true;
                        for c in rest {
                            ok = ok && c.holds(env)?;
                        }
                        ok
                    }
                };
                if blocks {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }

    /// Transitions enabled at a state reached by an event at which the
    /// guards in `crossed` changed sign.
    fn enabled_at(
        &self,
        mode: usize,
        env: &[f64],
        crossed: &[usize],
    ) -> Result<Vec<usize>, EvalError> {
        let mut out = Vec::new();
        for i in self.outgoing(mode) {
            let ok = match &self.triggers[i] {
                Trigger::Level => self.ha.transitions[i].guard.holds(env)?,
                Trigger::Crossing { rest, .. } => {
                    let mut ok = crossed.contains(&i)
                        || self.ha.transitions[i].guard.holds(env)?;
                    for c in rest {
                        ok = ok && c.holds(env)?;
                    }
                    ok
                }
            };
            if ok && self.reset_feasible(i, env)? {
                out.push(i);
            }
        }
        Ok(out)
    }

    /// Simulates from `s0` for `horizon` time units.
    pub fn run(
        &self,
        s0: &State,
        horizon: f64,
        policy: TransitionPolicy,
        opts: SimOptions,
        seed: u64,
    ) -> Result<Trajectory, SimError> {
        let ha = self.ha;
        let n = ha.dim();
        let cfg = &self.cfg;
        let mut rng = rng::rng(seed);
        let mut probe = Probe {
            env: s0.env(),
            n,
        };
        let h_max = cfg
            .max_step
            .unwrap_or(ha.time_bound / 100.0)
            .min(if horizon > 0.0 { horizon } else { f64::INFINITY })
            .max(1e-12);
        let max_jumps = self.max_jumps();

        let mut mode = s0.mode;
        let mut x = s0.x.clone();
        let mut t = 0.0_f64;
        let mut segments: Vec<Segment> = Vec::new();
        let mut jumps: Vec<Jump> = Vec::new();
        let mut steps = 0usize;
        let mut h_carry: Option<f64> = None;
        let mut next_grid = 0.0_f64;

        let finish = |segments: Vec<Segment>, jumps: Vec<Jump>, status: Status| Trajectory {
            segments,
            jumps,
            status,
            params: s0.p.clone(),
        };

        macro_rules! push_point {
            ($t:expr, $x:expr) => {{
                let seg = segments.last_mut().expect("open segment");
                seg.times.push($t);
                seg.states.push($x.to_vec());
            }};
        }

        'segment: loop {
            segments.push(Segment {
                mode,
                times: vec![t],
                states: vec![x.clone()],
            });
            if let Record::Grid(dt) = opts.record {
                // the segment start is recorded; advance past it
                while next_grid <= t {
                    next_grid += dt;
                }
            }

            let env = probe.set(&x).to_vec();
            let eval_err = |source| SimError::Eval { t, source };
            if opts.stop_on_unsafe && ha.unsafe_set.holds(&env).map_err(eval_err)? {
                return Ok(finish(segments, jumps, Status::HitUnsafe(t)));
            }
            let inv_ok = ha.modes[mode].invariant.holds(&env).map_err(eval_err)?;
            let immediate: Vec<usize> = if ha.urgent {
                let mut v = Vec::new();
                for i in self.outgoing(mode) {
                    if matches!(self.triggers[i], Trigger::Level)
                        && ha.transitions[i].guard.holds(&env).map_err(eval_err)?
                        && self.reset_feasible(i, &env).map_err(eval_err)?
                    {
                        v.push(i);
                    }
                }
                v
            } else {
                Vec::new()
            };
            if !immediate.is_empty() || !inv_ok {
                let enabled = if immediate.is_empty() {
                    self.enabled_at(mode, &env, &[]).map_err(eval_err)?
                } else {
                    immediate
                };
                let choice = match policy {
                    TransitionPolicy::Deterministic => {
                        if enabled.len() > 1 {
                            return Err(SimError::Nondeterministic {
                                t,
                                count: enabled.len(),
                            });
                        }
                        enabled.first().copied()
                    }
                    TransitionPolicy::RandomWalk => {
                        if enabled.is_empty() {
                            None
                        } else {
                            Some(enabled[rng.random_range(0..enabled.len())])
                        }
                    }
                };
                let Some(tr) = choice else {
                    return Ok(finish(segments, jumps, Status::Blocked(t)));
                };
                if jumps.len() >= max_jumps {
                    return Ok(finish(segments, jumps, Status::JumpBudgetExhausted(t)));
                }
                let post = self.apply_reset(tr, &x, &env, &mut rng).map_err(eval_err)?;
                jumps.push(Jump {
                    time: t,
                    transition: tr,
                    pre: x.clone(),
                    post: post.clone(),
                });
                mode = ha.transitions[tr].target;
                x = post;
                continue 'segment;
            }

            if t >= horizon {
                return Ok(finish(segments, jumps, Status::Completed));
            }

            // continuous evolution until an event or the horizon
            let mut flow = Flow {
                exprs: &ha.modes[mode].flow,
                env: probe.env.clone(),
            };
            let mut watches: Vec<Watch> = Vec::new();
            if opts.stop_on_unsafe {
                watches.push(Watch::Unsafe);
            }
            watches.extend(self.outgoing(mode).into_iter().map(Watch::Guard));
            watches.extend(
                (0..ha.barriers.len())
                    .filter(|&i| ha.barriers[i].mode == mode)
                    .map(Watch::Barrier),
            );
            watches.push(Watch::Invariant);

            let mut k1 = vec![0.0; n];
            flow.eval(&x, &mut k1)
                .map_err(|source| SimError::NonFiniteDerivative { t, source })?;
            let mut h = h_carry
                .unwrap_or_else(|| dopri::initial_step(&x, &k1, cfg.rel_tol, cfg.abs_tol, h_max))
                .min(h_max);
            let mut base: Vec<f64> = watches
                .iter()
                .map(|&w| self.watch_value(w, mode, probe.set(&x)))
                .collect::<Result<_, _>>()
                .map_err(eval_err)?;
            // a reverse jump lands on a forward guard; leaving it is no crossing
            for (w, b) in watches.iter().zip(base.iter_mut()) {
                if let Watch::Barrier(i) = *w {
                    if matches!(self.barriers[i], Trigger::Crossing { .. }) && b.abs() <= cfg.guard_tol {
                        *b = 0.0;
                    }
                }
            }
            let mut rejected = false;

            loop {
                let remaining = horizon - t;
                let mut h_try = h.min(remaining);
                if remaining - h_try < 1e-3 * h_try {
                    h_try = remaining;
                }
                if h_try <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
                    return Err(SimError::StepUnderflow { t });
                }
                let trial = match dopri::trial(&mut flow, &x, &k1, h_try, cfg.rel_tol, cfg.abs_tol)
                {
                    Ok(tr) if tr.err.is_finite() && tr.x_new.iter().all(|v| v.is_finite()) => tr,
                    _ => {
                        h = h_try * 0.25;
                        rejected = true;
                        continue;
                    }
                };
                if trial.err > 1.0 {
                    let fac = (0.9 * trial.err.powf(-0.2)).clamp(0.2, 1.0);
                    h = h_try * fac;
                    rejected = true;
                    continue;
                }
                steps += 1;
                if steps > cfg.max_steps {
                    return Err(SimError::TooManySteps { t });
                }
                let t_end = if h_try == remaining { horizon } else { t + h_try };
                let dense = trial.dense(&x, t, h_try);

                if let Some((te, hits)) = self.detect(&watches, &base, mode, &dense, t, t_end, &trial.x_new, &mut probe)? {
                    let xe = if te == t_end { trial.x_new.clone() } else { dense.state(te) };
                    if let Record::Grid(dt) = opts.record {
                        while next_grid < te {
                            push_point!(next_grid, dense.state(next_grid));
                            next_grid += dt;
                        }
                    }
                    push_point!(te, &xe);
                    let env = probe.set(&xe).to_vec();
                    let eval_err = |source| SimError::Eval { t: te, source };
                    if hits.contains(&Watch::Unsafe) {
                        return Ok(finish(segments, jumps, Status::HitUnsafe(te)));
                    }
                    if self.barrier_blocks(&hits, &env).map_err(eval_err)? {
                        return Ok(finish(segments, jumps, Status::Blocked(te)));
                    }
                    let crossed: Vec<usize> = hits
                        .iter()
                        .filter_map(|w| match w {
                            Watch::Guard(i) => Some(*i),
                            _ => None,
                        })
                        .collect();
                    let inv_ok = ha.modes[mode].invariant.holds(&env).map_err(eval_err)?;
                    let enabled = self.enabled_at(mode, &env, &crossed).map_err(eval_err)?;
                    let choice = match policy {
                        TransitionPolicy::Deterministic => {
                            if enabled.len() > 1 {
                                return Err(SimError::Nondeterministic {
                                    t: te,
                                    count: enabled.len(),
                                });
                            }
                            enabled.first().copied()
                        }
                        TransitionPolicy::RandomWalk => {
                            let stay = usize::from(!ha.urgent && inv_ok);
                            let k = enabled.len() + stay;
                            if k == 0 {
                                None
                            } else {
                                enabled.get(rng.random_range(0..k)).copied()
                            }
                        }
                    };
                    match choice {
                        Some(tr) => {
                            if jumps.len() >= max_jumps {
                                return Ok(finish(segments, jumps, Status::JumpBudgetExhausted(te)));
                            }
                            let post = self.apply_reset(tr, &xe, &env, &mut rng).map_err(eval_err)?;
                            jumps.push(Jump {
                                time: te,
                                transition: tr,
                                pre: xe,
                                post: post.clone(),
                            });
                            mode = ha.transitions[tr].target;
                            x = post;
                            t = te;
                            h_carry = Some(h_try);
                            continue 'segment;
                        }
                        None if !inv_ok => {
                            return Ok(finish(segments, jumps, Status::Blocked(te)));
                        }
                        None => {
                            // stay in the mode and restart integration at the event
                            t = te;
                            x = xe;
                            flow.eval(&x, &mut k1)
                                .map_err(|source| SimError::NonFiniteDerivative { t, source })?;
                            base = watches
                                .iter()
                                .map(|&w| self.watch_value(w, mode, probe.set(&x)))
                                .collect::<Result<_, _>>()
                                .map_err(|source| SimError::Eval { t, source })?;
                            h = h_try;
                            if t >= horizon {
                                return Ok(finish(segments, jumps, Status::Completed));
                            }
                            continue;
                        }
                    }
                }

                match opts.record {
                    Record::Steps => push_point!(t_end, &trial.x_new),
                    Record::Grid(dt) => {
                        while next_grid <= t_end {
                            let p = if next_grid == t_end {
                                trial.x_new.clone()
                            } else {
                                dense.state(next_grid)
                            };
                            push_point!(next_grid, p);
                            next_grid += dt;
                        }
                    }
                    Record::Endpoints => {}
                }
                t = t_end;
                x = trial.x_new;
                k1 = trial.k7;
                if x.iter().any(|v| v.abs() > cfg.state_bound) {
                    return Err(SimError::Diverged { t });
                }
                base = watches
                    .iter()
                    .map(|&w| self.watch_value(w, mode, probe.set(&x)))
                    .collect::<Result<_, _>>()
                    .map_err(|source| SimError::Eval { t, source })?;
                let fac = if trial.err == 0.0 {
                    10.0
                } else {
                    (0.9 * trial.err.powf(-0.2)).clamp(0.2, 10.0)
                };
                h = (h_try * if rejected { fac.min(1.0) } else { fac }).min(h_max);
                rejected = false;
                if t >= horizon {
                    let seg = segments.last_mut().expect("open segment");
                    if seg.times.last() != Some(&t) {
                        seg.times.push(t);
                        seg.states.push(x.clone());
                    }
                    return Ok(finish(segments, jumps, Status::Completed));
                }
            }
        }
    }

    /// Finds the earliest event inside an accepted step. Returns the event
    /// time and every watcher that fired within `event_tol` of it.
    #[allow(clippy::too_many_arguments)]
    fn detect(
        &self,
        watches: &[Watch],
        base: &[f64],
        mode: usize,
        dense: &Dense,
        t0: f64,
        t1: f64,
        x1: &[f64],
        probe: &mut Probe,
    ) -> Result<Option<(f64, Vec<Watch>)>, SimError> {
        const SUB: usize = 4;
        let mut lo = t0;
        let mut buf = vec![0.0; x1.len()];
        for j in 1..=SUB {
            let tj = if j == SUB {
                t1
            } else {
                t0 + (t1 - t0) * j as f64 / SUB as f64
            };
            if j == SUB {
                buf.copy_from_slice(x1);
            } else {
                dense.at(tj, &mut buf);
            }
            let env = probe.set(&buf).to_vec();
            let mut fired = Vec::new();
            for (k, &w) in watches.iter().enumerate() {
                let v = self
                    .watch_value(w, mode, &env)
                    .map_err(|source| SimError::Eval { t: tj, source })?;
                if self.triggered(w, base[k], v) {
                    fired.push(k);
                }
            }
            if fired.is_empty() {
                lo = tj;
                continue;
            }
            // bisect each fired watcher inside [lo, tj]
            let mut times = Vec::with_capacity(fired.len());
            for &k in &fired {
                let w = watches[k];
                let (mut a, mut b) = (lo, tj);
                while b - a > self.cfg.event_tol {
                    let mid = 0.5 * (a + b);
                    if mid <= a || mid >= b {
                        break;
                    }
                    dense.at(mid, &mut buf);
                    let v = self
                        .watch_value(w, mode, probe.set(&buf))
                        .map_err(|source| SimError::Eval { t: mid, source })?;
                    if self.triggered(w, base[k], v) {
                        b = mid;
                    } else {
                        a = mid;
                    }
                }
                times.push((b, w));
            }
            let te = times.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let mut hits: Vec<Watch> = times
                .iter()
                .filter(|p| p.0 <= te + self.cfg.event_tol)
                .map(|p| p.1)
                .collect();
            hits.sort();
            return Ok(Some((te, hits)));
        }
        Ok(None)
    }

    /// Integrates the flow of `mode` for `duration` without any events.
    pub fn integrate(&self, mode: usize, x0: &[f64], p: &[f64], duration: f64) -> Result<Vec<f64>, SimError> {
        let s = State {
            mode,
            x: x0.to_vec(),
            p: p.to_vec(),
        };
        let free = HybridAutomaton {
            transitions: Vec::new(),
            modes: self
                .ha
                .modes
                .iter()
                .map(|m| crate::model::Mode {
                    invariant: Expr::Num(1.0),
                    ..m.clone()
                })
                .collect(),
            urgent: true,
            ..self.ha.clone()
        };
        let sim = Simulator::new(&free, &self.cfg);
        let opts = SimOptions {
            stop_on_unsafe: false,
            record: Record::Endpoints,
        };
        let traj = sim.run(&s, duration, TransitionPolicy::Deterministic, opts, 0)?;
        Ok(traj.end_state().x)
    }
}

/// Simulates `ha` from `s0` up to `horizon`, stopping on entry into the
/// unsafe set.
pub fn simulate(
    ha: &HybridAutomaton,
    s0: &State,
    horizon: f64,
    policy: TransitionPolicy,
    cfg: &IntegratorConfig,
    seed: u64,
) -> Result<Trajectory, SimError> {
    Simulator::new(ha, cfg).run(
        s0,
        horizon,
        policy,
        SimOptions {
            stop_on_unsafe: true,
            record: Record::Steps,
        },
        seed,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: Label,
    /// Runs that ended blocked (invariant violated, nothing enabled).
    pub blocked: u32,
    /// Runs cut off by the jump budget.
    pub truncated: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub integrator: IntegratorConfig,
    /// Random-walk rollouts for nondeterministic automata.
    pub n_rollouts: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            integrator: IntegratorConfig::default(),
            n_rollouts: 100,
        }
    }
}

impl Simulator<'_> {
    /// Time-bounded reachability of the unsafe set from `s`. Deterministic
    /// automata need one run; nondeterministic ones are under-approximated
    /// by `n_rollouts` random walks.
    pub fn reach(&self, s: &State, n_rollouts: usize, seed: u64) -> Result<Verdict, SimError> {
        let opts = SimOptions::default();
        let horizon = self.ha.time_bound;
        let (policy, runs) = if self.ha.deterministic {
            (TransitionPolicy::Deterministic, 1)
        } else {
            (TransitionPolicy::RandomWalk, n_rollouts.max(1))
        };
        let mut v = Verdict {
            label: Label::Negative,
            blocked: 0,
            truncated: 0,
        };
        for r in 0..runs {
            let traj = self.run(s, horizon, policy, opts, derive_seed(seed, streams::ORACLE, r as u64))?;
            match traj.status {
                Status::HitUnsafe(_) => {
                    v.label = Label::Positive;
                    return Ok(v);
                }
                Status::Blocked(_) => v.blocked += 1,
                Status::JumpBudgetExhausted(_) => v.truncated += 1,
                Status::Completed => {}
            }
        }
        if v.blocked > 0 {
            log::debug!("{} blocked run(s) labeled negative", v.blocked);
        }
        Ok(v)
    }
}

pub fn reach_oracle(
    ha: &HybridAutomaton,
    s: &State,
    cfg: &OracleConfig,
    seed: u64,
) -> Result<Verdict, SimError> {
    Simulator::new(ha, &cfg.integrator).reach(s, cfg.n_rollouts, seed)
}

/// Draws a positive state by running the reverse automaton from the unsafe
/// state `u` for a random duration in `(0, horizon]`, retrying until the
/// endpoint lies in the sampling domain and outside the unsafe set.
pub fn backward_sample(
    rev: &HybridAutomaton,
    u: &State,
    horizon: f64,
    cfg: &IntegratorConfig,
    seed: u64,
    retries: usize,
) -> Result<State, SimError> {
    let sim = Simulator::new(rev, cfg);
    backward_sample_with(&sim, u, horizon, seed, retries).map(|(s, _)| s)
}

/// As [`backward_sample`], also returning the chosen duration.
pub fn backward_sample_with(
    sim: &Simulator<'_>,
    u: &State,
    horizon: f64,
    seed: u64,
    retries: usize,
) -> Result<(State, f64), SimError> {
    let rev = sim.model();
    let mut rng = rng::rng(seed);
    let opts = SimOptions {
        stop_on_unsafe: false,
        record: Record::Endpoints,
    };
    for attempt in 0..retries.max(1) {
        let tau = horizon * (1.0 - rng.random::<f64>());
        let run_seed = derive_seed(seed, streams::BALANCED_POS, attempt as u64);
        let traj = match sim.run(u, tau, TransitionPolicy::RandomWalk, opts, run_seed) {
            Ok(t) => t,
            Err(SimError::Diverged { .. } | SimError::StepUnderflow { .. } | SimError::TooManySteps { .. }) => {
                continue
            }
            Err(e) => return Err(e),
        };
        if traj.status != Status::Completed {
            continue;
        }
        let s = traj.end_state();
        if rev.in_domain(&s) && !rev.in_unsafe(&s) {
            return Ok((s, tau));
        }
    }
    Err(SimError::BackwardBudget(retries))
}

/// Forward-simulates `s` for `horizon`, replays the mirrored jump sequence
/// on the reverse automaton from the end state, and returns the sup-norm
/// distance between the recovered start and `s`, with each coordinate
/// scaled by the width of the mode's sampling domain.
pub fn reverse_roundtrip_check(
    ha: &HybridAutomaton,
    s: &State,
    horizon: f64,
    cfg: &IntegratorConfig,
) -> Result<f64, SimError> {
    let fwd_sim = Simulator::new(ha, cfg);
    let opts = SimOptions {
        stop_on_unsafe: false,
        record: Record::Endpoints,
    };
    let fwd = fwd_sim.run(s, horizon, TransitionPolicy::Deterministic, opts, 0)?;
    if fwd.status != Status::Completed {
        return Err(SimError::Incomplete(fwd.status));
    }
    let rev = ha.reverse()?;
    let rev_sim = Simulator::new(&rev, cfg);

    let end = fwd.end_state();
    let mut mode = end.mode;
    let mut x = end.x.clone();
    let mut t_rev = 0.0;
    for jump in fwd.jumps.iter().rev() {
        let t_jump = horizon - jump.time;
        if t_jump > t_rev {
            x = rev_sim.integrate(mode, &x, &s.p, t_jump - t_rev)?;
        }
        t_rev = t_jump;
        let tr = &rev.transitions[jump.transition];
        debug_assert_eq!(tr.source, mode);
        let mut env = x.clone();
        env.extend_from_slice(&s.p);
        let residual = tr
            .guard
            .violation(&env)
            .map_err(|source| SimError::Eval { t: t_rev, source })?;
        let scale = x.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        if residual > cfg.guard_tol * scale {
            return Err(SimError::ReversalInconsistency {
                t: t_rev,
                transition: jump.transition,
                residual,
            });
        }
        // nondeterministic coordinates take the recorded pre-jump values
        let mut next = Vec::with_capacity(x.len());
        for (i, r) in tr.resets.iter().enumerate() {
            next.push(match r {
                Reset::Interval { .. } => jump.pre[i],
                _ => r
                    .apply(x[i], &env, 0.0)
                    .map_err(|source| SimError::Eval { t: t_rev, source })?,
            });
        }
        x = next;
        mode = tr.target;
    }
    if horizon > t_rev {
        x = rev_sim.integrate(mode, &x, &s.p, horizon - t_rev)?;
    }
    if mode != s.mode {
        return Err(SimError::ReversalInconsistency {
            t: horizon,
            transition: usize::MAX,
            residual: f64::INFINITY,
        });
    }
    let widths = ha.domain[s.mode].widths();
    Ok(x
        .iter()
        .zip(&s.x)
        .zip(&widths)
        .map(|((a, b), w)| (a - b).abs() / if *w > 0.0 { *w } else { 1.0 })
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::bundled;
    use rand::SeedableRng;

    fn cfg() -> IntegratorConfig {
        IntegratorConfig::default()
    }

    #[test]
    fn zero_horizon_is_a_single_point() {
        let ha = bundled("neuron").unwrap();
        let s = ha.state(0, vec![-60.0, 5.0]);
        let traj = simulate(&ha, &s, 0.0, TransitionPolicy::Deterministic, &cfg(), 1).unwrap();
        assert_eq!(traj.status, Status::Completed);
        assert_eq!(traj.segments.len(), 1);
        assert_eq!(traj.segments[0].states, vec![s.x.clone()]);
        assert!(traj.jumps.is_empty());
    }

    #[test]
    fn neuron_spikes_from_rest() {
        let ha = bundled("neuron").unwrap();
        let s = ha.state(0, vec![0.0, 0.0]);
        let traj = simulate(&ha, &s, 20.0, TransitionPolicy::Deterministic, &cfg(), 1).unwrap();
        assert!(!traj.jumps.is_empty());
        for j in &traj.jumps {
            assert!(j.pre[0] >= 30.0 && j.pre[0] < 30.0 + 1e-3, "{:?}", j.pre);
            assert_eq!(j.post[0], -65.0);
            assert!((j.post[1] - j.pre[1] - 8.0).abs() < 1e-12);
        }
        let xi = traj.switching_times();
        assert_eq!(xi[0], 0.0);
        assert!(xi.windows(2).all(|w| w[0] < w[1]));
        assert!(*xi.last().unwrap() <= 20.0);
    }

    #[test]
    fn simulation_is_deterministic() {
        let ha = bundled("quadcopter").unwrap();
        let mut x = vec![0.01, 0.05, 0.0, 0.1, -0.3, 80.0, 40.0];
        x[5] = 80.0;
        let s = ha.state(0, x);
        let a = simulate(&ha, &s, 15.0, TransitionPolicy::Deterministic, &cfg(), 9).unwrap();
        let b = simulate(&ha, &s, 15.0, TransitionPolicy::Deterministic, &cfg(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pendulum_stabilizes() {
        let ha = bundled("pendulum").unwrap();
        let s = ha.state(0, vec![0.5, 1.0]);
        let traj = simulate(&ha, &s, 10.0, TransitionPolicy::Deterministic, &cfg(), 0).unwrap();
        assert_eq!(traj.status, Status::Completed);
        let end = traj.end_state();
        assert!(end.x[0].abs() < 0.05, "{:?}", end.x);
    }

    #[test]
    fn unreachable_unsafe_is_negative() {
        let text = r#"{
            "variables": ["x"],
            "modes": [{"id": "a", "flow": {"x": "-x"}}],
            "unsafe": "x <= -1000000000",
            "domain": {"a": {"x": [-5, 5]}},
            "T": 5
        }"#;
        let ha = crate::model::parse_model(text).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x: f64 = rand::Rng::random_range(&mut rng, -5.0..5.0);
            let v = reach_oracle(&ha, &ha.state(0, vec![x]), &OracleConfig::default(), 0).unwrap();
            assert_eq!(v.label, Label::Negative);
        }
    }

    #[test]
    fn immediate_crossing_is_positive() {
        let text = r#"{
            "variables": ["x"],
            "modes": [{"id": "a", "flow": {"x": "-1"}}],
            "unsafe": "x <= 0",
            "domain": {"a": {"x": [0, 5]}},
            "T": 1
        }"#;
        let ha = crate::model::parse_model(text).unwrap();
        let v = reach_oracle(&ha, &ha.state(0, vec![1e-9]), &OracleConfig::default(), 0).unwrap();
        assert_eq!(v.label, Label::Positive);
    }

    #[test]
    fn blocked_run_is_negative_and_counted() {
        let text = r#"{
            "variables": ["x"],
            "modes": [{"id": "a", "flow": {"x": "1"}, "invariant": "x <= 1"}],
            "unsafe": "x >= 10",
            "domain": {"a": {"x": [0, 1]}},
            "T": 20
        }"#;
        let ha = crate::model::parse_model(text).unwrap();
        let v = reach_oracle(&ha, &ha.state(0, vec![0.0]), &OracleConfig::default(), 0).unwrap();
        assert_eq!(v.label, Label::Negative);
        assert_eq!(v.blocked, 1);
    }

    #[test]
    fn equality_guard_switches_quadcopter_mode() {
        let ha = bundled("quadcopter").unwrap();
        // climbing in mode 1 from 480 m crosses z = 500
        let s = ha.state(0, vec![0.0, 0.0, 0.0, 0.0, 0.0, 480.0, 50.0]);
        let traj = simulate(&ha, &s, 2.0, TransitionPolicy::Deterministic, &cfg(), 0).unwrap();
        assert!(!traj.jumps.is_empty());
        assert!((traj.jumps[0].pre[5] - 500.0).abs() < 1e-6);
        assert_eq!(traj.segments[1].mode, 1);
    }

    #[test]
    fn reverse_run_stops_at_forward_guard() {
        let ha = bundled("quadcopter").unwrap();
        let rev = ha.reverse().unwrap();
        assert_eq!(rev.barriers.len(), 2);
        // backward in time, z falls through 200 in mode 2; forward it would
        // have jumped to mode 1 there
        let s = rev.state(1, vec![0.0, 0.0, 0.0, 0.0, 0.0, 210.0, 50.0]);
        let opts = SimOptions {
            stop_on_unsafe: false,
            record: Record::Endpoints,
        };
        let sim = Simulator::new(&rev, &cfg());
        for seed in 0..5 {
            let traj = sim.run(&s, 1.0, TransitionPolicy::RandomWalk, opts, seed).unwrap();
            match traj.status {
                Status::Blocked(t) => assert!(t > 0.1 && t < 0.3, "{t}"),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn roundtrip_zero_horizon() {
        let ha = bundled("neuron").unwrap();
        let s = ha.state(0, vec![-50.0, 10.0]);
        assert_eq!(reverse_roundtrip_check(&ha, &s, 0.0, &cfg()).unwrap(), 0.0);
    }

    #[test]
    fn roundtrip_without_jumps() {
        let ha = bundled("neuron").unwrap();
        let s = ha.state(0, vec![-60.0, 20.0]);
        let d = reverse_roundtrip_check(&ha, &s, 0.5, &IntegratorConfig::precise()).unwrap();
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn roundtrip_through_a_spike() {
        let ha = bundled("neuron").unwrap();
        let s = ha.state(0, vec![-40.0, 5.0]);
        let fwd = simulate(&ha, &s, 3.0, TransitionPolicy::Deterministic, &cfg(), 0).unwrap();
        assert!(!fwd.jumps.is_empty());
        let d = reverse_roundtrip_check(&ha, &s, 3.0, &IntegratorConfig::precise()).unwrap();
        assert!(d < 1e-4, "{d}");
    }

    #[test]
    fn backward_samples_are_positive() {
        let ha = bundled("neuron").unwrap();
        let rev = ha.reverse().unwrap();
        let u = ha.state(0, vec![-68.6, 30.0]);
        let oracle = OracleConfig::default();
        for seed in 0..10 {
            let s = backward_sample(&rev, &u, ha.time_bound, &cfg(), seed, 200).unwrap();
            assert!(ha.in_domain(&s) && !ha.in_unsafe(&s));
            let v = reach_oracle(&ha, &s, &oracle, 0).unwrap();
            assert_eq!(v.label, Label::Positive, "{:?}", s.x);
        }
    }

    #[test]
    fn short_backward_run_stays_close() {
        let ha = bundled("neuron").unwrap();
        let rev = ha.reverse().unwrap();
        let sim = Simulator::new(&rev, &cfg());
        let x = sim.integrate(0, &[-68.5, 30.0], &ha.default_params(), 1e-9).unwrap();
        assert!((x[0] + 68.5).abs() < 1e-6 && (x[1] - 30.0).abs() < 1e-6);
    }
}
