//! Bootstrapped synthetic demonstrations for language-model agents.
//!
//! An agent explores a deterministic environment, a labeler turns the
//! trajectories into instructions, a follower re-executes them and a filter
//! keeps the pairs that agree. Accepted pairs are stored as demonstrations and
//! retrieved as in-context examples at evaluation time.

pub mod bootstrap;
pub mod components;
pub mod envsim;
pub mod eval;
pub mod lm;
pub mod par;
pub mod retrieval;
pub mod types;

pub use types::*;
