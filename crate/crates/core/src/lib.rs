// SPDX-License-Identifier: Apache-2.0

//! Non-commutative Lie-group VAE.
//!
//! A variational autoencoder whose continuous latent acts on a discrete
//! shape embedding through the matrix exponential of learned Lie-algebra
//! generators. Training runs in two phases: an unconstrained phase that
//! accumulates per-pair non-commutativity diagnostics, and a fine-tuning
//! phase that enforces `Δ_ij ≥ C·D_ij` with a calibrated constant `C`.

// Negated comparisons below deliberately reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::field_reassign_with_default))]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod evalmetrics;
pub mod gradcore;
pub mod liegroup;
pub mod matcore;
pub mod model;
pub mod rng;
pub mod toydata;
pub mod trainer;

pub use error::{Error, Result};
