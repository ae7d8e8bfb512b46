// SPDX-License-Identifier: Apache-2.0

use super::graph::{Graph, NodeId};
use crate::error::Result;

/// Finite-difference gradient check settings.
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are compared in absolute terms.
    pub denom_floor: f64,
    /// Check at most this many evenly spaced entries per leaf.
    pub max_entries_per_leaf: Option<usize>,
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            step: 1e-5,
            tolerance,
            denom_floor: 1e-6,
            max_entries_per_leaf: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LeafCheck {
    pub leaf: NodeId,
    pub name: Option<String>,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves
            .iter()
            .map(|l| l.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    pub fn failures(&self) -> Vec<&LeafCheck> {
        self.leaves
            .iter()
            .filter(|l| l.max_rel_error > self.tolerance)
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of the scalar `output` against central
/// finite differences for every leaf in `leaves`, replaying the tape for
/// each perturbation. The graph is restored before returning.
pub fn check_gradients(
    graph: &mut Graph,
    output: NodeId,
    leaves: &[NodeId],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let grads = graph.backward(output)?;
    let mut report = GradCheckReport {
        leaves: Vec::with_capacity(leaves.len()),
        tolerance: opts.tolerance,
    };
    for &leaf in leaves {
        let analytic = grads.get(leaf);
        let original = graph.value(leaf).clone();
        let n = original.len();
        let indices: Vec<usize> = match opts.max_entries_per_leaf {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut check = LeafCheck {
            leaf,
            name: graph.leaf_name(leaf).map(str::to_string),
            entries_checked: indices.len(),
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &idx in &indices {
            let x0 = original.data()[idx];
            graph.set_leaf_entry(leaf, idx, x0 + opts.step);
            graph.recompute()?;
            let plus = graph.value(output).item();
            graph.set_leaf_entry(leaf, idx, x0 - opts.step);
            graph.recompute()?;
            let minus = graph.value(output).item();
            graph.set_leaf_entry(leaf, idx, x0);
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric, opts.denom_floor);
            if err > check.max_rel_error || (check.max_rel_error == 0.0 && idx == indices[0]) {
                check.max_rel_error = err;
                check.worst_entry = idx;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.leaves.push(check);
    }
    graph.recompute()?;
    Ok(report)
}
