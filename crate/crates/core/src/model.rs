//! Hybrid automaton data model, JSON model files and reverse-automaton
//! construction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{BinOp, CmpOp, EvalError, Expr, Func, ParseError, Scope};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model schema violation: {0}")]
    Schema(String),
    #[error("expression `{text}` in {context}: {source}")]
    Expr {
        context: String,
        text: String,
        source: ParseError,
    },
    #[error("unknown mode `{0}`")]
    UnknownMode(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("evaluation failed in {context}: {source}")]
    Eval { context: String, source: EvalError },
    #[error("cannot reverse transition {index}: {reason}")]
    Unsupported { index: usize, reason: String },
}

type Result<T> = std::result::Result<T, ModelError>;

/// Axis-aligned box, one closed interval per continuous variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion(pub Vec<(f64, f64)>);

impl BoxRegion {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.0
            .iter()
            .zip(x)
            .all(|(&(lo, hi), &v)| v >= lo && v <= hi)
    }

    pub fn widths(&self) -> Vec<f64> {
        self.0.iter().map(|(lo, hi)| hi - lo).collect()
    }

    /// Smallest box containing both.
    pub fn hull(&self, other: &BoxRegion) -> BoxRegion {
        BoxRegion(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| (a.0.min(b.0), a.1.max(b.1)))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    pub default: f64,
    pub range: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct Mode {
    pub id: String,
    /// One derivative expression per continuous variable.
    pub flow: Vec<Expr>,
    pub invariant: Expr,
}

/// Per-variable reset applied at a discrete jump. Arguments are
/// expressions over parameters only.
#[derive(Debug, Clone, PartialEq)]
pub enum Reset {
    Identity,
    Const(Expr),
    /// `x' = a * x + b`
    Affine { a: Expr, b: Expr },
    /// Nondeterministic choice `x' ∈ [lo, hi]`.
    Interval { lo: Expr, hi: Expr },
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub source: usize,
    pub target: usize,
    pub guard: Expr,
    pub resets: Vec<Reset>,
}

/// A forward guard that a run of a reverse automaton must not cross: the
/// urgent forward automaton would have jumped there, so no forward run
/// passes through the crossing.
#[derive(Debug, Clone)]
pub struct Barrier {
    pub mode: usize,
    pub guard: Expr,
}

/// Discrete mode index, continuous variables and parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub mode: usize,
    pub x: Vec<f64>,
    pub p: Vec<f64>,
}

impl State {
    /// Evaluation environment: variables followed by parameters.
    pub fn env(&self) -> Vec<f64> {
        let mut env = Vec::with_capacity(self.x.len() + self.p.len());
        env.extend_from_slice(&self.x);
        env.extend_from_slice(&self.p);
        env
    }
}

#[derive(Debug, Clone)]
pub struct HybridAutomaton {
    pub name: String,
    pub variables: Vec<String>,
    pub parameters: Vec<ParameterSpec>,
    pub modes: Vec<Mode>,
    pub transitions: Vec<Transition>,
    pub unsafe_set: Expr,
    /// Sampling domain per mode.
    pub domain: Vec<BoxRegion>,
    /// Region unsafe states are drawn from for backward simulation.
    pub unsafe_domain: Vec<BoxRegion>,
    pub init: Option<Vec<Option<BoxRegion>>>,
    pub time_bound: f64,
    pub jump_bound: usize,
    /// At most one transition can be enabled at any event.
    pub deterministic: bool,
    /// Transitions fire as soon as their guard holds.
    pub urgent: bool,
    /// Empty except on reverse automata of urgent models.
    pub barriers: Vec<Barrier>,
    pub scope: Scope,
}

// ---------------------------------------------------------------------------
// JSON schema

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(default)]
    pub name: String,
    pub variables: Vec<String>,
    #[serde(default)]
    pub parameters: Vec<ParameterFile>,
    /// Named auxiliary expressions inlined wherever they are referenced.
    #[serde(default)]
    pub defs: Vec<(String, String)>,
    pub modes: Vec<ModeFile>,
    #[serde(default)]
    pub transitions: Vec<TransitionFile>,
    #[serde(rename = "unsafe")]
    pub unsafe_set: String,
    pub domain: BTreeMap<String, BTreeMap<String, (f64, f64)>>,
    #[serde(default)]
    pub unsafe_domain: Option<BTreeMap<String, BTreeMap<String, (f64, f64)>>>,
    #[serde(default)]
    pub init: Option<BTreeMap<String, BTreeMap<String, (f64, f64)>>>,
    #[serde(rename = "T")]
    pub time_bound: f64,
    #[serde(default = "default_jump_bound")]
    pub jump_bound: usize,
    #[serde(default = "yes")]
    pub deterministic: bool,
    #[serde(default = "yes")]
    pub urgent: bool,
    #[serde(default)]
    pub description: Option<String>,
}

fn default_jump_bound() -> usize {
    100
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterFile {
    pub name: String,
    pub default: f64,
    #[serde(default)]
    pub range: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeFile {
    pub id: String,
    pub flow: BTreeMap<String, String>,
    #[serde(default = "true_text")]
    pub invariant: String,
}

fn true_text() -> String {
    "1".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionFile {
    pub from: String,
    pub to: String,
    pub guard: String,
    #[serde(default)]
    pub resets: BTreeMap<String, ResetFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResetFile {
    pub kind: String,
    #[serde(default)]
    pub args: Vec<String>,
}

/// The case-study models shipped with the crate.
pub const BUNDLED: &[(&str, &str)] = &[
    ("neuron", include_str!("../models/neuron.json")),
    ("pendulum", include_str!("../models/pendulum.json")),
    ("pendulum_physical", include_str!("../models/pendulum_physical.json")),
    ("quadcopter", include_str!("../models/quadcopter.json")),
    ("cruise", include_str!("../models/cruise.json")),
];

pub fn bundled(name: &str) -> Result<HybridAutomaton> {
    let text = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| ModelError::Schema(format!("no bundled model `{name}`")))?;
    parse_model(text)
}

/// Loads a model from a path, or from the bundled set when `file` names
/// one of them (with or without the `.json` suffix) and does not exist on
/// disk.
pub fn load_model(file: impl AsRef<Path>) -> Result<HybridAutomaton> {
    let path = file.as_ref();
    if !path.exists() {
        let stem = path
            .file_name()
            .and_then(|s| s.to_str())
            .map(|s| s.trim_end_matches(".json"))
            .unwrap_or_default();
        if BUNDLED.iter().any(|(n, _)| *n == stem) {
            return bundled(stem);
        }
    }
    let text = std::fs::read_to_string(path)?;
    parse_model(&text)
}

pub fn parse_model(text: &str) -> Result<HybridAutomaton> {
    let file: ModelFile =
        serde_json::from_str(text).map_err(|e| ModelError::Schema(e.to_string()))?;
    HybridAutomaton::from_file(&file)
}

fn parse_in(scope: &Scope, text: &str, context: impl Into<String>) -> Result<Expr> {
    scope.parse(text).map_err(|source| ModelError::Expr {
        context: context.into(),
        text: text.to_string(),
        source,
    })
}

impl HybridAutomaton {
    pub fn from_file(file: &ModelFile) -> Result<Self> {
        let n = file.variables.len();
        if n == 0 {
            return Err(ModelError::Schema("no variables".into()));
        }
        if file.modes.is_empty() {
            return Err(ModelError::Schema("at least one mode required".into()));
        }
        let mut seen = HashSet::new();
        for v in file
            .variables
            .iter()
            .chain(file.parameters.iter().map(|p| &p.name))
        {
            if !seen.insert(v.as_str()) {
                return Err(ModelError::Schema(format!("duplicate name `{v}`")));
            }
        }
        if !(file.time_bound >= 0.0 && file.time_bound.is_finite()) {
            return Err(ModelError::Schema("T must be finite and non-negative".into()));
        }

        let parameters = file
            .parameters
            .iter()
            .map(|p| {
                let range = p.range.unwrap_or_else(|| {
                    let (a, b) = (0.5 * p.default, 1.5 * p.default);
                    (a.min(b), a.max(b))
                });
                if !(range.0 <= p.default && p.default <= range.1) {
                    return Err(ModelError::Schema(format!(
                        "parameter `{}` default {} outside [{}, {}]",
                        p.name, p.default, range.0, range.1
                    )));
                }
                Ok(ParameterSpec {
                    name: p.name.clone(),
                    default: p.default,
                    range,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let names: Vec<&str> = file
            .variables
            .iter()
            .map(String::as_str)
            .chain(parameters.iter().map(|p| p.name.as_str()))
            .collect();
        let mut scope = Scope::new(&names);
        for (name, body) in &file.defs {
            if scope.slot(name).is_some() {
                return Err(ModelError::Schema(format!("definition `{name}` shadows a variable")));
            }
            let e = parse_in(&scope, body, format!("definition `{name}`"))?;
            scope.define(name, e);
        }

        let mode_index: HashMap<&str, usize> = file
            .modes
            .iter()
            .enumerate()
            .map(|(i, m)| (m.id.as_str(), i))
            .collect();
        if mode_index.len() != file.modes.len() {
            return Err(ModelError::Schema("duplicate mode id".into()));
        }

        let mut modes = Vec::with_capacity(file.modes.len());
        for m in &file.modes {
            for key in m.flow.keys() {
                if !file.variables.contains(key) {
                    return Err(ModelError::Schema(format!(
                        "mode `{}` has flow for undeclared variable `{key}`",
                        m.id
                    )));
                }
            }
            let flow = file
                .variables
                .iter()
                .map(|v| {
                    let text = m.flow.get(v).ok_or_else(|| {
                        ModelError::Schema(format!("mode `{}` lacks flow for `{v}`", m.id))
                    })?;
                    parse_in(&scope, text, format!("flow {v}' in mode {}", m.id))
                })
                .collect::<Result<Vec<_>>>()?;
            let invariant = parse_in(&scope, &m.invariant, format!("invariant of {}", m.id))?;
            modes.push(Mode {
                id: m.id.clone(),
                flow,
                invariant,
            });
        }

        let param_scope = Scope::new(
            &parameters
                .iter()
                .map(|p| p.name.as_str())
                .collect::<Vec<_>>(),
        );
        let lift = |e: Expr| -> Expr {
            // parameter-only scope slots are offset by the variable count
            e.substitute(&|slot| scope.var(&parameters[slot].name))
        };

        let mut transitions = Vec::with_capacity(file.transitions.len());
        for (i, t) in file.transitions.iter().enumerate() {
            let source = *mode_index
                .get(t.from.as_str())
                .ok_or_else(|| ModelError::UnknownMode(t.from.clone()))?;
            let target = *mode_index
                .get(t.to.as_str())
                .ok_or_else(|| ModelError::UnknownMode(t.to.clone()))?;
            let guard = parse_in(&scope, &t.guard, format!("guard of transition {i}"))?;
            for key in t.resets.keys() {
                if !file.variables.contains(key) {
                    return Err(ModelError::Schema(format!(
                        "transition {i} resets undeclared variable `{key}`"
                    )));
                }
            }
            let mut resets = Vec::with_capacity(n);
            for v in &file.variables {
                let Some(r) = t.resets.get(v) else {
                    resets.push(Reset::Identity);
                    continue;
                };
                let ctx = format!("reset of `{v}` in transition {i}");
                let args = r
                    .args
                    .iter()
                    .map(|a| parse_in(&param_scope, a, ctx.clone()).map(&lift))
                    .collect::<Result<Vec<_>>>()?;
                let want = match r.kind.as_str() {
                    "identity" => 0,
                    "const" | "constant" => 1,
                    "affine" | "interval" => 2,
                    other => {
                        return Err(ModelError::Schema(format!("{ctx}: unknown kind `{other}`")))
                    }
                };
                if args.len() != want {
                    return Err(ModelError::Schema(format!(
                        "{ctx}: `{}` takes {want} argument(s)",
                        r.kind
                    )));
                }
                let mut args = args.into_iter();
                resets.push(match r.kind.as_str() {
                    "identity" => Reset::Identity,
                    "const" | "constant" => Reset::Const(args.next().unwrap()),
                    "affine" => Reset::Affine {
                        a: args.next().unwrap(),
                        b: args.next().unwrap(),
                    },
                    _ => Reset::Interval {
                        lo: args.next().unwrap(),
                        hi: args.next().unwrap(),
                    },
                });
            }
            transitions.push(Transition {
                source,
                target,
                guard,
                resets,
            });
        }

        let unsafe_set = parse_in(&scope, &file.unsafe_set, "unsafe set")?;

        let boxes = |spec: &BTreeMap<String, BTreeMap<String, (f64, f64)>>,
                     what: &str|
         -> Result<Vec<Option<BoxRegion>>> {
            for key in spec.keys() {
                if key != "*" && !mode_index.contains_key(key.as_str()) {
                    return Err(ModelError::UnknownMode(key.clone()));
                }
            }
            file.modes
                .iter()
                .map(|m| {
                    let Some(b) = spec.get(&m.id).or_else(|| spec.get("*")) else {
                        return Ok(None);
                    };
                    let region = file
                        .variables
                        .iter()
                        .map(|v| {
                            let &(lo, hi) = b.get(v).ok_or_else(|| {
                                ModelError::Schema(format!(
                                    "{what} for mode `{}` lacks variable `{v}`",
                                    m.id
                                ))
                            })?;
                            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                                return Err(ModelError::Schema(format!(
                                    "{what} interval for `{v}` is empty or unbounded"
                                )));
                            }
                            Ok((lo, hi))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Some(BoxRegion(region)))
                })
                .collect()
        };
        let domain = boxes(&file.domain, "domain")?
            .into_iter()
            .zip(&file.modes)
            .map(|(b, m)| {
                b.ok_or_else(|| ModelError::Schema(format!("mode `{}` has no domain", m.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let unsafe_domain = match &file.unsafe_domain {
            Some(spec) => boxes(spec, "unsafe_domain")?
                .into_iter()
                .zip(&domain)
                .map(|(b, d)| b.unwrap_or_else(|| d.clone()))
                .collect(),
            None => domain.clone(),
        };
        let init = match &file.init {
            Some(spec) => Some(boxes(spec, "init")?),
            None => None,
        };

        Ok(HybridAutomaton {
            name: file.name.clone(),
            variables: file.variables.clone(),
            parameters,
            modes,
            transitions,
            unsafe_set,
            domain,
            unsafe_domain,
            init,
            time_bound: file.time_bound,
            jump_bound: file.jump_bound,
            deterministic: file.deterministic,
            urgent: file.urgent,
            barriers: Vec::new(),
            scope,
        })
    }

    pub fn dim(&self) -> usize {
        self.variables.len()
    }

    pub fn mode_index(&self, id: &str) -> Option<usize> {
        self.modes.iter().position(|m| m.id == id)
    }

    pub fn default_params(&self) -> Vec<f64> {
        self.parameters.iter().map(|p| p.default).collect()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.parameters.iter().position(|p| p.name == name)
    }

    /// Replaces a parameter's default value.
    pub fn set_parameter(&mut self, name: &str, value: f64) -> Result<()> {
        let i = self
            .param_index(name)
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))?;
        let p = &mut self.parameters[i];
        p.default = value;
        p.range = (p.range.0.min(value), p.range.1.max(value));
        Ok(())
    }

    pub fn state(&self, mode: usize, x: Vec<f64>) -> State {
        State {
            mode,
            x,
            p: self.default_params(),
        }
    }

    /// Hull of all per-mode sampling domains.
    pub fn domain_hull(&self) -> BoxRegion {
        self.domain
            .iter()
            .skip(1)
            .fold(self.domain[0].clone(), |acc, b| acc.hull(b))
    }

    fn check_state(&self, s: &State) {
        debug_assert!(s.mode < self.modes.len());
        debug_assert_eq!(s.x.len(), self.dim());
        debug_assert_eq!(s.p.len(), self.parameters.len());
    }

    pub fn in_unsafe(&self, s: &State) -> bool {
        self.check_state(s);
        self.unsafe_set.holds(&s.env()).unwrap_or(false)
    }

    pub fn in_invariant(&self, s: &State) -> bool {
        self.check_state(s);
        self.modes[s.mode].invariant.holds(&s.env()).unwrap_or(false)
    }

    pub fn in_domain(&self, s: &State) -> bool {
        self.domain[s.mode].contains(&s.x)
    }

    /// Indices of transitions leaving `s.mode` whose guard holds at `s`.
    pub fn enabled_transitions(&self, s: &State) -> Vec<usize> {
        self.check_state(s);
        let env = s.env();
        self.transitions
            .iter()
            .enumerate()
            .filter(|(_, t)| t.source == s.mode && t.guard.holds(&env).unwrap_or(false))
            .map(|(i, _)| i)
            .collect()
    }

    /// Builds the reverse automaton: negated flows and every transition
    /// `(l, g, v, l')` replaced by `(l', v(g), v⁻¹, l)`. Constant resets are
    /// not injective and become nondeterministic interval resets over the
    /// guard's projection onto the source mode's domain.
    pub fn reverse(&self) -> Result<HybridAutomaton> {
        let n = self.dim();
        let modes = self
            .modes
            .iter()
            .map(|m| Mode {
                id: m.id.clone(),
                flow: m.flow.iter().map(|f| f.clone().neg()).collect(),
                invariant: m.invariant.clone(),
            })
            .collect();

        let mut transitions = Vec::with_capacity(self.transitions.len());
        for (index, t) in self.transitions.iter().enumerate() {
            let var = |i: usize| self.scope.var(&self.variables[i]).expect("declared variable");
            let const_slots: Vec<usize> = (0..n)
                .filter(|&i| matches!(t.resets[i], Reset::Const(_)))
                .collect();

            let mut atoms: Vec<Expr> = Vec::new();
            for (i, r) in t.resets.iter().enumerate() {
                if let Reset::Const(c) = r {
                    atoms.push(Expr::cmp(CmpOp::Eq, var(i), c.clone()));
                }
            }
            // x_j = (x_j' - b) / a for affine resets; identity untouched
            let preimage = |slot: usize| -> Option<Expr> {
                if slot >= n {
                    return None;
                }
                match &t.resets[slot] {
                    Reset::Affine { a, b } => Some(Expr::bin(
                        BinOp::Div,
                        Expr::bin(BinOp::Sub, var(slot), b.clone()),
                        a.clone(),
                    )),
                    _ => None,
                }
            };
            for atom in t.guard.conjuncts() {
                if atom.references_any(&const_slots) {
                    continue;
                }
                atoms.push(atom.substitute(&preimage));
            }
            let guard = atoms
                .into_iter()
                .reduce(Expr::and)
                .unwrap_or(Expr::Num(1.0));

            let mut resets = Vec::with_capacity(n);
            for (i, r) in t.resets.iter().enumerate() {
                resets.push(match r {
                    Reset::Identity => Reset::Identity,
                    Reset::Affine { a, b } => {
                        let a0 = a.eval(&self.param_env()).map_err(|source| ModelError::Eval {
                            context: format!("affine reset of transition {index}"),
                            source,
                        })?;
                        if a0 == 0.0 {
                            return Err(ModelError::Unsupported {
                                index,
                                reason: "affine reset with zero slope".into(),
                            });
                        }
                        Reset::Affine {
                            a: fold(Expr::bin(BinOp::Div, Expr::Num(1.0), a.clone())),
                            b: fold(Expr::bin(BinOp::Div, b.clone(), a.clone()).neg()),
                        }
                    }
                    Reset::Const(_) => {
                        let (lo, hi) = self.domain[t.source].0[i];
                        let (mut lo, mut hi) = (Expr::Num(lo), Expr::Num(hi));
                        for atom in t.guard.conjuncts() {
                            if let Some((lower, upper)) = bound_on(atom, i, n) {
                                if let Some(l) = lower {
                                    lo = fold(Expr::Call(Func::Max, vec![lo, l]));
                                }
                                if let Some(u) = upper {
                                    hi = fold(Expr::Call(Func::Min, vec![hi, u]));
                                }
                            }
                        }
                        Reset::Interval { lo, hi }
                    }
                    Reset::Interval { .. } => {
                        return Err(ModelError::Unsupported {
                            index,
                            reason: "nondeterministic reset cannot be inverted".into(),
                        })
                    }
                });
            }
            transitions.push(Transition {
                source: t.target,
                target: t.source,
                guard,
                resets,
            });
        }

        let barriers = if self.urgent {
            self.transitions
                .iter()
                .map(|t| Barrier {
                    mode: t.source,
                    guard: t.guard.clone(),
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(HybridAutomaton {
            name: format!("{}-reverse", self.name),
            modes,
            transitions,
            deterministic: false,
            urgent: false,
            barriers,
            ..self.clone()
        })
    }

    /// Environment with zero variables and default parameters, for
    /// evaluating parameter-only expressions.
    pub fn param_env(&self) -> Vec<f64> {
        let mut env = vec![0.0; self.dim()];
        env.extend(self.default_params());
        env
    }
}

/// Lower/upper bound on variable `slot` stated by a comparison atom whose
/// other side does not mention any variable.
fn bound_on(atom: &Expr, slot: usize, n: usize) -> Option<(Option<Expr>, Option<Expr>)> {
    let Expr::Cmp(op, a, b) = atom else {
        return None;
    };
    let is_var = |e: &Expr| matches!(e, Expr::Var { slot: s, .. } if *s == slot);
    let param_only = |e: &Expr| e.slots().iter().all(|&s| s >= n);
    let (op, rhs) = if is_var(a) && param_only(b) {
        (*op, (**b).clone())
    } else if is_var(b) && param_only(a) {
        let flipped = match op {
            CmpOp::Lt => CmpOp::Gt,
            CmpOp::Le => CmpOp::Ge,
            CmpOp::Gt => CmpOp::Lt,
            CmpOp::Ge => CmpOp::Le,
            other => *other,
        };
        (flipped, (**a).clone())
    } else {
        return None;
    };
    Some(match op {
        CmpOp::Gt | CmpOp::Ge => (Some(rhs), None),
        CmpOp::Lt | CmpOp::Le => (None, Some(rhs)),
        CmpOp::Eq => (Some(rhs.clone()), Some(rhs)),
        CmpOp::Ne => return None,
    })
}

/// Constant-folds a node whose children are all numeric literals.
fn fold(e: Expr) -> Expr {
    if e.slots().is_empty() {
        if let Ok(v) = e.eval(&[]) {
            return Expr::Num(v);
        }
    }
    e
}

impl Reset {
    /// Applies a deterministic reset; interval resets take `choice ∈ [0, 1]`
    /// as the relative position inside the interval.
    pub fn apply(&self, x: f64, env: &[f64], choice: f64) -> std::result::Result<f64, EvalError> {
        Ok(match self {
            Reset::Identity => x,
            Reset::Const(c) => c.eval(env)?,
            Reset::Affine { a, b } => a.eval(env)? * x + b.eval(env)?,
            Reset::Interval { lo, hi } => {
                let (lo, hi) = (lo.eval(env)?, hi.eval(env)?);
                lo + choice * (hi - lo)
            }
        })
    }

    pub fn interval(&self, env: &[f64]) -> Option<std::result::Result<(f64, f64), EvalError>> {
        match self {
            Reset::Interval { lo, hi } => Some(lo.eval(env).and_then(|l| Ok((l, hi.eval(env)?)))),
            _ => None,
        }
    }
}
