// SPDX-License-Identifier: Apache-2.0

//! Pairwise non-commutativity diagnostics and the calibrated stability
//! constraint.
//!
//! Two quantities are tracked for every generator pair `i < j`:
//!
//! * the latent deviation `D_ij = ‖exp(t_i A_i + t_j A_j) − exp(t_i A_i) exp(t_j A_j)‖_F`;
//! * the decoder order swap `Δ_ij = E‖dec(G_i G_j Ĝ e) − dec(G_j G_i Ĝ e)‖₂`
//!   with `G_k = exp(t_k A_k)`, `Ĝ = mat(ẑ)` and the discrete embedding
//!   `e` held fixed.
//!
//! Running means of both feed the calibration of the scale `C`; the
//! training penalty uses in-graph per-batch estimates instead.

use serde::{Deserialize, Serialize};

use crate::config::CalibrationConfig;
use crate::error::{Error, Result};
use crate::gradcore::{Array, Graph, NodeId};
use crate::liegroup::{self, GeneratorBank};
use crate::matcore::{self, DenseMatrix};
use crate::model::{BatchNoise, Model};

/// Unordered pairs `(i, j)`, `i < j`, in row-major order.
pub fn pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d)
        .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
        .collect()
}

pub fn pair_count(d: usize) -> usize {
    d * d.saturating_sub(1) / 2
}

fn pair_index(d: usize, i: usize, j: usize) -> Result<usize> {
    if i >= j || j >= d {
        return Err(Error::invalid(format!("pair ({i}, {j}) needs i < j < {d}")));
    }
    // Pairs before row i, then the offset within row i.
    Ok(i * (2 * d - i - 1) / 2 + (j - i - 1))
}

/// Running means for one pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub i: usize,
    pub j: usize,
    pub d_mean: f64,
    pub delta_mean: f64,
    pub count: u64,
}

/// Running means of `D_ij` and `Δ_ij` over diagnostic evaluations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    d: usize,
    entries: Vec<PairEntry>,
}

impl PairStats {
    pub fn new(d: usize) -> Self {
        let entries = pairs(d)
            .into_iter()
            .map(|(i, j)| PairEntry {
                i,
                j,
                ..PairEntry::default()
            })
            .collect();
        Self { d, entries }
    }

    /// Stats holding the given means with count 1 each, in [`pairs`] order.
    pub fn from_means(d: usize, d_means: &[f64], delta_means: &[f64]) -> Result<Self> {
        let mut s = Self::new(d);
        if d_means.len() != s.entries.len() || delta_means.len() != s.entries.len() {
            return Err(Error::dim(format!(
                "expected {} pair means",
                s.entries.len()
            )));
        }
        for (k, (dm, am)) in d_means.iter().zip(delta_means).enumerate() {
            let (i, j) = (s.entries[k].i, s.entries[k].j);
            s.accumulate(i, j, *dm, *am)?;
        }
        Ok(s)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn entries(&self) -> &[PairEntry] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> Result<&PairEntry> {
        Ok(&self.entries[pair_index(self.d, i, j)?])
    }

    /// `mean ← mean + (x − mean)/count`.
    pub fn accumulate(&mut self, i: usize, j: usize, dev: f64, delta: f64) -> Result<()> {
        if !(dev >= 0.0 && delta >= 0.0) {
            return Err(Error::invalid(format!(
                "pair ({i}, {j}): D = {dev}, Δ = {delta} must be finite and ≥ 0"
            )));
        }
        let e = &mut self.entries[pair_index(self.d, i, j)?];
        e.count += 1;
        let n = e.count as f64;
        e.d_mean += (dev - e.d_mean) / n;
        e.delta_mean += (delta - e.delta_mean) / n;
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.count > 0)
    }

    pub fn reset(&mut self) {
        for e in &mut self.entries {
            e.d_mean = 0.0;
            e.delta_mean = 0.0;
            e.count = 0;
        }
    }

    fn require_initialized(&self) -> Result<()> {
        match self.entries.iter().find(|e| e.count == 0) {
            Some(e) => Err(Error::InvalidState(format!(
                "pair ({}, {}) has no diagnostic evaluations",
                e.i, e.j
            ))),
            None if self.entries.is_empty() => {
                Err(Error::InvalidState("no generator pairs".into()))
            }
            None => Ok(()),
        }
    }
}

/// `D_ij` for one sample, using only components `t_i`, `t_j`.
pub fn bch_deviation(bank: &GeneratorBank, i: usize, j: usize, t: &[f64]) -> Result<f64> {
    if i == j {
        return Err(Error::invalid(format!("pair ({i}, {j}) is not a pair")));
    }
    if i >= bank.d() || j >= bank.d() || t.len() != bank.d() {
        return Err(Error::dim(format!(
            "pair ({i}, {j}) with {} coordinates for {} generators",
            t.len(),
            bank.d()
        )));
    }
    let ai = bank.generator(i).scale(t[i]);
    let aj = bank.generator(j).scale(t[j]);
    let joint = matcore::mat_exp(&ai.try_add(&aj)?)?;
    let product = matcore::mat_exp(&ai)?.matmul(&matcore::mat_exp(&aj)?)?;
    matcore::frobenius_norm(&joint.try_sub(&product)?)
}

/// One sample's inputs to the order-swap diagnostic.
#[derive(Clone, Debug)]
pub struct SwapSample {
    pub t: Vec<f64>,
    /// `Ĝ · mat(e)`, the point the two orderings act on.
    pub anchor: DenseMatrix,
}

/// Reference `Δ_ij` for an arbitrary decoder, one sample at a time.
pub fn order_swap_delta_with<F>(
    decode: F,
    bank: &GeneratorBank,
    samples: &[SwapSample],
    i: usize,
    j: usize,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if i == j {
        return Err(Error::invalid(format!("pair ({i}, {j}) is not a pair")));
    }
    if samples.is_empty() {
        return Err(Error::invalid("order swap over an empty batch"));
    }
    let mut total = 0.0;
    for s in samples {
        let gi = bank.one_parameter(i, s.t[i])?;
        let gj = bank.one_parameter(j, s.t[j])?;
        let a = decode(gi.matmul(&gj)?.matmul(&s.anchor)?.data())?;
        let b = decode(gj.matmul(&gi)?.matmul(&s.anchor)?.data())?;
        if a.len() != b.len() {
            return Err(Error::dim("decoder output length changed"));
        }
        total += a
            .iter()
            .zip(&b)
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total / samples.len() as f64)
}

/// Per-pair `[P, 1]` nodes for the batch means of `D` and `Δ`.
#[derive(Clone, Copy, Debug)]
pub struct PairTermNodes {
    pub dev: NodeId,
    pub delta: NodeId,
}

/// Builds batch-mean `D_ij` and `Δ_ij` for all pairs on the tape, so both
/// are differentiable with respect to the generators, the encoders and the
/// decoder. `t`, `zhat` and `embed` are `[m, d]`, `[m, n²]`, `[m, n²]`.
pub fn pair_terms_on_graph(
    model: &Model,
    g: &mut Graph,
    t: NodeId,
    zhat: NodeId,
    embed: NodeId,
) -> Result<PairTermNodes> {
    let (d, n) = (model.dims.d, model.dims.n);
    let m = g.value(t).shape()[0];
    let nn = n * n;
    let pair_list = pairs(d);
    let p = pair_list.len();
    if p == 0 {
        return Err(Error::invalid("need at least two generators"));
    }
    let gens = g.named_input(crate::model::GENERATORS, || {
        model
            .params
            .get(crate::model::GENERATORS)
            .expect("generators")
            .clone()
    });

    // t_k A_k for every generator, stacked generator-major: [d·m, n, n].
    let mut scaled = Vec::with_capacity(d);
    for k in 0..d {
        let tk = g.slice(t, 1, k, 1)?;
        let ak = g.slice(gens, 0, k, 1)?;
        let flat = g.matmul(tk, ak)?;
        scaled.push(g.reshape(flat, &[m, n, n])?);
    }
    let stacked = g.concat(&scaled, 0)?;
    let one_param = g.mat_exp(stacked)?;
    let factor = |g: &mut Graph, k: usize| g.slice(one_param, 0, k * m, m);

    let mut left = Vec::with_capacity(p);
    let mut right = Vec::with_capacity(p);
    let mut sums = Vec::with_capacity(p);
    for &(i, j) in &pair_list {
        left.push(factor(g, i)?);
        right.push(factor(g, j)?);
        sums.push(g.add(scaled[i], scaled[j])?);
    }
    let gi = g.concat(&left, 0)?;
    let gj = g.concat(&right, 0)?;
    let forward = g.matmul(gi, gj)?;
    let swapped = g.matmul(gj, gi)?;

    let sum_all = g.concat(&sums, 0)?;
    let joint = g.mat_exp(sum_all)?;
    let gap = g.sub(joint, forward)?;
    let gap_sq = g.square(gap)?;
    let gap_flat = g.reshape(gap_sq, &[p * m, nn])?;
    let dev = row_norm_means(g, gap_flat, p, m)?;

    let zmat = g.reshape(zhat, &[m, n, n])?;
    let emat = g.reshape(embed, &[m, n, n])?;
    let anchor = g.matmul(zmat, emat)?;
    let anchors = g.concat(&vec![anchor; p], 0)?;
    let a = g.matmul(forward, anchors)?;
    let b = g.matmul(swapped, anchors)?;
    let a = g.reshape(a, &[p * m, nn])?;
    let b = g.reshape(b, &[p * m, nn])?;
    let both = g.concat(&[a, b], 0)?;
    let logits = model.decode_logits_on_graph(g, both)?;
    let images = g.sigmoid(logits)?;
    let xa = g.slice(images, 0, 0, p * m)?;
    let xb = g.slice(images, 0, p * m, p * m)?;
    let diff = g.sub(xa, xb)?;
    let diff_sq = g.square(diff)?;
    let delta = row_norm_means(g, diff_sq, p, m)?;
    Ok(PairTermNodes { dev, delta })
}

/// `[p·m, c]` squared entries → `[p, 1]` means over `m` of row norms.
fn row_norm_means(g: &mut Graph, squares: NodeId, p: usize, m: usize) -> Result<NodeId> {
    let row_sq = g.sum_rows(squares)?;
    let norms = g.sqrt(row_sq)?;
    let grid = g.reshape(norms, &[p, m])?;
    let avg = g.constant(Array::filled(&[m, 1], 1.0 / m as f64));
    g.matmul(grid, avg)
}

/// `λ · mean_pairs relu(C·D − Δ)²` on `[P, 1]` nodes.
pub fn hinge_on_graph(g: &mut Graph, terms: &PairTermNodes, c: f64, lambda: f64) -> Result<NodeId> {
    let scaled = g.scale(terms.dev, c)?;
    let gap = g.sub(scaled, terms.delta)?;
    let active = g.relu(gap)?;
    let sq = g.square(active)?;
    let mean = g.mean(sq)?;
    g.scale(mean, lambda)
}

/// Per-pair batch means of `D` and `Δ` from one sweep, in [`pairs`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub dev: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Diagnostic sweep over a batch: one draw of `t ~ q(t|ẑ)` and one relaxed
/// discrete code per image, both held fixed across all pairs and both
/// orderings. `D` uses the per-sample matrix exponential; `Δ` runs the
/// decoder on the tape without recording gradients.
pub fn sweep(model: &Model, x: &Array, noise: &BatchNoise, tau: f64) -> Result<Sweep> {
    let bank = model.generator_bank()?;
    let mut g = Graph::new();
    let xn = g.input(x.clone());
    let fwd = model.forward_on_graph(&mut g, xn, noise, tau)?;
    let terms = pair_terms_on_graph(model, &mut g, fwd.t, fwd.enc.zhat, fwd.embed)?;
    let delta = g.value(terms.delta).data().to_vec();
    let t = g.value(fwd.t).clone();
    let pair_list = pairs(model.dims.d);
    let mut dev = vec![0.0; pair_list.len()];
    for r in 0..t.rows() {
        for (k, &(i, j)) in pair_list.iter().enumerate() {
            dev[k] += bch_deviation(&bank, i, j, t.row(r))?;
        }
    }
    for v in &mut dev {
        *v /= t.rows() as f64;
    }
    Ok(Sweep { dev, delta })
}

/// `r_ij = Δ̄_ij / (D̄_ij + ε)` in [`pairs`] order.
pub fn scale_ratios(stats: &PairStats, eps_num: f64) -> Result<Vec<f64>> {
    stats.require_initialized()?;
    Ok(stats
        .entries
        .iter()
        .map(|e| e.delta_mean / (e.d_mean + eps_num))
        .collect())
}

/// `clamp(percentile_p(ratios), c_min, c_max)`.
pub fn calibrate_c(ratios: &[f64], p: f64, c_min: f64, c_max: f64) -> Result<f64> {
    if ratios.is_empty() {
        return Err(Error::InvalidState("no ratios to calibrate from".into()));
    }
    Ok(matcore::percentile(ratios, p)?.clamp(c_min, c_max))
}

/// `λ · mean_pairs max(0, C·D̄ − Δ̄)²`.
pub fn hinge_loss(stats: &PairStats, c: f64, lambda: f64) -> f64 {
    if stats.entries.is_empty() {
        return 0.0;
    }
    let total: f64 = stats
        .entries
        .iter()
        .map(|e| (c * e.d_mean - e.delta_mean).max(0.0).powi(2))
        .sum();
    lambda * total / stats.entries.len() as f64
}

/// `R_ij = Δ̄/(C·D̄ + ε)` per pair and their mean.
pub fn stability_ratio(stats: &PairStats, c: f64, eps_num: f64) -> (Vec<f64>, f64) {
    stability_ratio_of(
        stats.entries.iter().map(|e| (e.d_mean, e.delta_mean)),
        c,
        eps_num,
    )
}

/// [`stability_ratio`] on raw `(D, Δ)` values.
pub fn stability_ratio_of(
    values: impl Iterator<Item = (f64, f64)>,
    c: f64,
    eps_num: f64,
) -> (Vec<f64>, f64) {
    let r: Vec<f64> = values.map(|(dv, dl)| dl / (c * dv + eps_num)).collect();
    let mean = if r.is_empty() {
        0.0
    } else {
        r.iter().sum::<f64>() / r.len() as f64
    };
    (r, mean)
}

/// Fraction of pairs with `C·D̄ > Δ̄` (strict).
pub fn active_fraction(stats: &PairStats, c: f64) -> f64 {
    if stats.entries.is_empty() {
        return 0.0;
    }
    let active = stats
        .entries
        .iter()
        .filter(|e| c * e.d_mean > e.delta_mean)
        .count();
    active as f64 / stats.entries.len() as f64
}

/// Scale state of the constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    pub c: f64,
    pub c_emp: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub eta_c: f64,
    pub f_target: f64,
    pub freeze_epochs: usize,
    pub eps_num: f64,
}

impl CalibrationState {
    /// Calibrates `C_emp` from `stats` and starts with `C = C_emp`.
    pub fn calibrate(stats: &PairStats, cfg: &CalibrationConfig) -> Result<Self> {
        let ratios = scale_ratios(stats, cfg.eps_num)?;
        let c_emp = calibrate_c(&ratios, cfg.percentile, cfg.c_min, cfg.c_max)?;
        Ok(Self::with_c(c_emp, cfg))
    }

    pub fn with_c(c: f64, cfg: &CalibrationConfig) -> Self {
        Self {
            c,
            c_emp: c,
            c_min: cfg.c_min,
            c_max: cfg.c_max,
            eta_c: cfg.eta_c,
            f_target: cfg.f_target,
            freeze_epochs: cfg.freeze_epochs,
            eps_num: cfg.eps_num,
        }
    }

    /// Multiplicative update of `C` towards the target active fraction.
    pub fn update(&mut self, f_active: f64) {
        self.c = update_c(
            self.c,
            f_active,
            self.eta_c,
            self.f_target,
            self.c_min,
            self.c_max,
        );
    }
}

/// `clamp(C · exp(η (f_target − f_active)), C_min, C_max)`.
pub fn update_c(c: f64, f_active: f64, eta_c: f64, f_target: f64, c_min: f64, c_max: f64) -> f64 {
    (c * (eta_c * (f_target - f_active)).exp()).clamp(c_min, c_max)
}

/// Central-difference Jacobian columns of `t ↦ decode(vec(G(t)·e))` with
/// respect to `t_i` and `t_j`, reduced to their largest singular value.
pub fn manifold_sensitivity_with<F>(
    decode: F,
    bank: &GeneratorBank,
    t: &[f64],
    embed: &DenseMatrix,
    i: usize,
    j: usize,
    h: f64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step {h}")));
    }
    if i >= bank.d() || j >= bank.d() || t.len() != bank.d() {
        return Err(Error::dim("sensitivity pair or coordinates out of range"));
    }
    let column = |k: usize| -> Result<Vec<f64>> {
        let mut tp = t.to_vec();
        let mut tm = t.to_vec();
        tp[k] += h;
        tm[k] -= h;
        let up = decode(bank.group_element(&tp)?.matmul(embed)?.data())?;
        let down = decode(bank.group_element(&tm)?.matmul(embed)?.data())?;
        Ok(up
            .iter()
            .zip(&down)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect())
    };
    matcore::two_column_sigma_max(&column(i)?, &column(j)?)
}

/// `U_ij` per image of `x`, at `t = μ` with the hard discrete code.
pub fn manifold_sensitivity(
    model: &Model,
    x: &Array,
    i: usize,
    j: usize,
    h: f64,
) -> Result<Vec<f64>> {
    let bank = model.generator_bank()?;
    let enc = model.encode(x)?;
    let table = model.param(crate::model::EMBEDDING)?;
    let decode = |s: &[f64]| -> Result<Vec<f64>> {
        let batch = Array::new(vec![1, s.len()], s.to_vec())?;
        Ok(model.decode(&batch)?.into_data())
    };
    (0..x.rows())
        .map(|r| {
            let k = crate::model::argmax(enc.logits.row(r));
            let embed = liegroup::mat(table.row(k))?;
            manifold_sensitivity_with(decode, &bank, enc.mu.row(r), &embed, i, j, h)
        })
        .collect()
}
