//! Minimal reverse-mode automatic differentiation over `f64` scalars.
//!
//! A [`Tape`] is an append-only arena. Every operation on a [`Node`] pushes
//! a new entry recording its value and the local derivative with respect to
//! each operand, so arena order is already a topological order and
//! [`backward`] is a single reverse sweep.
//!
//! ```
//! use prefopt::autodiff::{Tape, ParamId};
//!
//! let tape = Tape::new();
//! let x = tape.param(ParamId(0), 2.0);
//! let y = tape.param(ParamId(1), 3.0);
//! let z = x * y;
//! let grads = z.backward().unwrap();
//! assert_eq!(grads.get(ParamId(0)), 3.0);
//! assert_eq!(grads.get(ParamId(1)), 2.0);
//! ```
//!
//! [`Tape::stop_gradient`] passes a value forward and blocks its derivative.
//! A tape built with [`Tape::with_frozen_stops`] replays previously recorded
//! stop-gradient values instead, which is how [`finite_diff_check`] compares
//! against the function in which every `sg[...]` argument is held constant.

mod check;
pub mod scalar;
mod tape;

pub use check::{finite_diff_check, CheckFailure, CheckOptions, CheckReport, StopHandling};
pub use tape::{backward, GradientMap, Node, ParamId, Tape};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("malformed graph: {0}")]
    Structure(String),
}
