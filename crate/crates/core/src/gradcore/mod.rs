// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode differentiation over dense arrays.
//!
//! [`Graph`] is a tape: each builder call evaluates immediately and records
//! the primitive. [`Graph::backward`] sweeps the tape in reverse from a
//! scalar output; [`Graph::forward`] replays it with rebound inputs, which is
//! what [`check_gradients`] uses for its finite differences.

mod adam;
mod array;
mod check;
mod graph;

pub use adam::{AdamConfig, Parameter, ParameterSet};
pub use array::Array;
pub use check::{check_gradients, relative_error, GradCheckOptions, GradCheckReport, LeafCheck};
pub use graph::{Gradients, Graph, NodeId, Op};

#[cfg(test)]
mod tests;
