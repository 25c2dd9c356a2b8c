//! Neural state classification for hybrid automata.
//!
//! The crate learns classifiers that predict whether an unsafe set is
//! reachable from a given state within a time bound. Labels come from a
//! simulation oracle; balanced training sets are built by running the
//! reverse automaton backwards from unsafe states. Trained networks are
//! certified with sequential probability ratio tests and hardened against
//! false negatives with a genetic falsifier.

pub mod classify;
pub mod eval;
pub mod expr;
pub mod falsify;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod sim;

pub use expr::{parse_expr, print_expr, Expr};
pub use model::{bundled, load_model, HybridAutomaton, State};
pub use sim::{reach_oracle, simulate, IntegratorConfig, Label, OracleConfig, TransitionPolicy};
