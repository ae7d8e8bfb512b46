// SPDX-License-Identifier: Apache-2.0

//! Run configuration. TOML with a strict schema: unknown keys are rejected
//! so sweep edits cannot silently miss.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable that overrides [`TrainConfig::seed`].
pub const SEED_ENV: &str = "NCVAE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub calibration: CalibrationConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Existing dataset file; when absent the dataset is generated.
    pub path: Option<PathBuf>,
    pub count: usize,
    pub side: usize,
    pub seed: u64,
    /// Trailing images held out for final evaluation.
    pub eval_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of continuous Lie coordinates (generators).
    pub d: usize,
    /// Generator side; latent feature size is `n²`.
    pub n: usize,
    /// Number of discrete categories.
    pub k: usize,
    pub hidden: usize,
    pub group_hidden: usize,
    pub init_scale: f64,
    pub tau: f64,
    /// Let the mutual-information loss back-propagate into the decoder.
    pub mi_grad_into_decoder: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_mi: f64,
    pub lambda_usage: f64,
    pub lambda_unc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    /// Zero Adam moments at the start of phase 2.
    pub reset_moments_phase2: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub percentile: f64,
    pub eta_c: f64,
    pub f_target: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub freeze_epochs: usize,
    /// Optimizer steps between diagnostic sweeps.
    pub k_diag: usize,
    pub eps_num: f64,
    /// Size of the fixed diagnostic batch.
    pub diag_batch: usize,
    /// Monte-Carlo draws of (t, z_disc) per image and sweep.
    pub diag_draws: usize,
    /// Leading samples of each batch used for the in-graph hinge estimates.
    pub hinge_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fvm_votes: usize,
    pub fvm_samples_per_vote: usize,
    pub fvm_bins: usize,
    /// Append the hard discrete code to the latent used for FVM.
    pub fvm_include_discrete: bool,
    /// Finite-difference step for manifold sensitivity.
    pub fd_step: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            calibration: CalibrationConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            count: 2048,
            side: 16,
            seed: 7,
            eval_count: 256,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 6,
            n: 4,
            k: 3,
            hidden: 256,
            group_hidden: 64,
            init_scale: 2e-4,
            tau: 0.67,
            mi_grad_into_decoder: true,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda_mi: 0.6,
            lambda_usage: 0.001,
            lambda_unc: 0.1,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            epochs_phase1: 8,
            epochs_phase2: 12,
            reset_moments_phase2: false,
        }
    }
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            percentile: 90.0,
            eta_c: 0.05,
            f_target: 0.2,
            c_min: 1e-4,
            c_max: 1e4,
            freeze_epochs: 2,
            k_diag: 8,
            eps_num: 1e-8,
            diag_batch: 64,
            diag_draws: 1,
            hinge_samples: 8,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fvm_votes: 500,
            fvm_samples_per_vote: 64,
            fvm_bins: 10,
            fvm_include_discrete: false,
            fd_step: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Applies the [`SEED_ENV`] override when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn image_pixels(&self) -> usize {
        self.data.side * self.data.side
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let m = &self.model;
        if m.d < 2 {
            return fail(format!("model.d = {} must be ≥ 2", m.d));
        }
        if m.n < 2 {
            return fail(format!("model.n = {} must be ≥ 2", m.n));
        }
        if m.k < 2 {
            return fail(format!("model.k = {} must be ≥ 2", m.k));
        }
        if m.hidden == 0 || m.group_hidden == 0 {
            return fail("hidden widths must be positive".into());
        }
        if !(m.tau > 0.0) {
            return fail(format!("model.tau = {} must be > 0", m.tau));
        }
        if !(m.init_scale >= 0.0) {
            return fail("model.init_scale must be ≥ 0".into());
        }
        let l = &self.loss;
        for (name, v) in [
            ("alpha", l.alpha),
            ("beta", l.beta),
            ("lambda_mi", l.lambda_mi),
            ("lambda_usage", l.lambda_usage),
            ("lambda_unc", l.lambda_unc),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("loss.{name} = {v} must be a finite value ≥ 0"));
            }
        }
        let o = &self.optim;
        if o.batch_size == 0 {
            return fail("optim.batch_size must be ≥ 1".into());
        }
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return fail("optim.lr/beta1/beta2 out of range".into());
        }
        let c = &self.calibration;
        if !(c.c_min > 0.0 && c.c_min < c.c_max) {
            return fail(format!(
                "need 0 < c_min < c_max, got [{}, {}]",
                c.c_min, c.c_max
            ));
        }
        if !(0.0..=100.0).contains(&c.percentile) {
            return fail(format!("calibration.percentile = {}", c.percentile));
        }
        if !(0.0..=1.0).contains(&c.f_target) {
            return fail(format!("calibration.f_target = {}", c.f_target));
        }
        if c.k_diag == 0 || c.diag_batch == 0 || c.diag_draws == 0 || c.hinge_samples == 0 {
            return fail("k_diag, diag_batch, diag_draws and hinge_samples must be ≥ 1".into());
        }
        if !(c.eps_num > 0.0) {
            return fail("calibration.eps_num must be > 0".into());
        }
        let d = &self.data;
        if d.side < 12 {
            return fail(format!("data.side = {} must be ≥ 12", d.side));
        }
        if d.count == 0 || d.eval_count >= d.count {
            return fail(format!(
                "data.count = {} must exceed data.eval_count = {}",
                d.count, d.eval_count
            ));
        }
        if self.eval.fvm_votes < 10 {
            return fail("eval.fvm_votes must be ≥ 10".into());
        }
        if self.eval.fvm_samples_per_vote < 2 || self.eval.fvm_bins == 0 {
            return fail("eval.fvm_samples_per_vote ≥ 2 and fvm_bins ≥ 1 required".into());
        }
        if !(self.eval.fd_step > 0.0) {
            return fail("eval.fd_step must be > 0".into());
        }
        Ok(())
    }
}
