// SPDX-License-Identifier: Apache-2.0

//! Two-phase curriculum. Phase 1 trains the unconstrained objective while
//! accumulating pairwise diagnostics; Phase 2 calibrates `C` from them and
//! adds the stability hinge, adapting `C` once per epoch after a freeze.
//!
//! All randomness comes from named streams keyed by the global epoch or
//! step, so a run resumed from a checkpoint, or one with the hinge switched
//! off, sees exactly the same draws as an uninterrupted run.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::diagnostics::{
    self, active_fraction, calibrate_c, pairs, scale_ratios, CalibrationState, PairStats, Sweep,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{self, FvmOptions, FvmResult};
use crate::gradcore::{AdamConfig, Array, Graph, ParameterSet};
use crate::model::{sample_gumbel, sample_normal, BatchNoise, Model};
use crate::rng;
use crate::toydata::{write_atomic, Dataset};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const PHASES_FILE: &str = "phases.csv";
pub const REPORT_FILE: &str = "report.json";

pub const DIAGNOSTICS_HEADER: &str = "step,phase,i,j,D,Delta,Dbar,Deltabar,r,C,R,f_active";
pub const PHASES_HEADER: &str = "step,epoch,phase,delta_bar,scaled_dev,r_bar,recon,C,f_active";

/// One pair at one diagnostic evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub step: u64,
    pub phase: u8,
    pub i: usize,
    pub j: usize,
    pub dev: f64,
    pub delta: f64,
    pub d_mean: f64,
    pub delta_mean: f64,
    pub r: f64,
    pub c: f64,
    pub stability: f64,
    pub f_active: f64,
}

/// Pair-averaged series at one diagnostic evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalRow {
    pub step: u64,
    pub epoch: usize,
    pub phase: u8,
    /// Mean over pairs of this evaluation's `Δ`.
    pub delta_bar: f64,
    /// Mean over pairs of `C·D`.
    pub scaled_dev: f64,
    /// Mean over pairs of `Δ/(C·D + ε)`.
    pub r_bar: f64,
    /// Mean training reconstruction loss since the previous evaluation.
    pub recon: f64,
    pub c: f64,
    pub f_active: f64,
}

/// Batch-averaged losses of one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: u8,
    pub steps: usize,
    pub total: f64,
    pub recon: f64,
    pub consistency: f64,
    pub kl: f64,
    pub mi: f64,
    pub usage: f64,
    pub hinge: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEvent {
    pub epoch: usize,
    pub f_active: f64,
    pub c_before: f64,
    pub c_after: f64,
}

/// Everything besides the parameters needed to continue a run bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config: TrainConfig,
    pub dataset_checksum: String,
    /// Global epochs completed.
    pub epoch: usize,
    pub step: u64,
    pub phase1_stats: PairStats,
    pub phase2_stats: PairStats,
    /// Phase-2 statistics since the last `C` update.
    pub window: PairStats,
    pub calibration: Option<CalibrationState>,
    pub calibration_history: Vec<CalibrationEvent>,
    pub diagnostics: Vec<DiagnosticRow>,
    pub intervals: Vec<IntervalRow>,
    pub epochs: Vec<EpochLog>,
    recon_since_interval: f64,
    batches_since_interval: usize,
}

pub struct Trainer {
    data: Dataset,
    train: Vec<usize>,
    eval: Vec<usize>,
    diag_x: Array,
    pub model: Model,
    pub state: RunState,
}

fn phase_of(cfg: &TrainConfig, epoch: usize) -> u8 {
    if epoch < cfg.optim.epochs_phase1 {
        1
    } else {
        2
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(&cfg.model, cfg.image_pixels(), cfg.seed)?;
        let d = cfg.model.d;
        let state = RunState {
            dataset_checksum: data.checksum(),
            epoch: 0,
            step: 0,
            phase1_stats: PairStats::new(d),
            phase2_stats: PairStats::new(d),
            window: PairStats::new(d),
            calibration: None,
            calibration_history: Vec::new(),
            diagnostics: Vec::new(),
            intervals: Vec::new(),
            epochs: Vec::new(),
            recon_since_interval: 0.0,
            batches_since_interval: 0,
            config: cfg,
        };
        Self::assemble(data, model, state)
    }

    /// Continues a run from a checkpoint's state and parameters.
    pub fn resume(data: Dataset, state: RunState, params: ParameterSet) -> Result<Self> {
        if data.checksum() != state.dataset_checksum {
            return Err(Error::InvalidState(
                "dataset differs from the one the checkpoint was trained on".into(),
            ));
        }
        let model = model_with_params(&state.config, params)?;
        Self::assemble(data, model, state)
    }

    pub fn load_checkpoint(path: &Path, data: Dataset) -> Result<Self> {
        let (state, params) = checkpoint::load::<RunState>(path)?;
        Self::resume(data, state, params)
    }

    fn assemble(data: Dataset, model: Model, state: RunState) -> Result<Self> {
        let cfg = &state.config;
        if data.side() != cfg.data.side {
            return Err(Error::Config(format!(
                "dataset side {} differs from data.side = {}",
                data.side(),
                cfg.data.side
            )));
        }
        if data.len() <= cfg.data.eval_count {
            return Err(Error::Config(format!(
                "dataset has {} images, data.eval_count = {}",
                data.len(),
                cfg.data.eval_count
            )));
        }
        let split = data.len() - cfg.data.eval_count;
        let train: Vec<usize> = (0..split).collect();
        let eval: Vec<usize> = (split..data.len()).collect();
        let mut order = train.clone();
        order.shuffle(&mut rng::stream(cfg.seed, rng::DIAGNOSTICS, u64::MAX));
        order.truncate(cfg.calibration.diag_batch.min(train.len()));
        let diag_x = data.batch(&order);
        Ok(Self {
            data,
            train,
            eval,
            diag_x,
            model,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn eval_indices(&self) -> &[usize] {
        &self.eval
    }

    pub fn total_epochs(&self) -> usize {
        self.config().optim.epochs_phase1 + self.config().optim.epochs_phase2
    }

    /// Runs every remaining epoch of both phases.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.total_epochs())
    }

    /// Runs global epochs until `epoch` have completed.
    pub fn run_until(&mut self, epoch: usize) -> Result<()> {
        let end = epoch.min(self.total_epochs());
        while self.state.epoch < end {
            self.run_epoch()?;
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        let o = &self.config().optim;
        AdamConfig {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        }
    }

    fn begin_phase2(&mut self) -> Result<()> {
        let cal = CalibrationState::calibrate(&self.state.phase1_stats, &self.config().calibration)
            .map_err(|e| match e {
                Error::InvalidState(msg) => Error::InvalidState(format!(
                    "phase 2 needs phase-1 diagnostics to calibrate C: {msg}"
                )),
                other => other,
            })?;
        self.state.calibration = Some(cal);
        if self.config().optim.reset_moments_phase2 {
            self.model.params.reset_moments();
        }
        Ok(())
    }

    fn run_epoch(&mut self) -> Result<()> {
        let e = self.state.epoch;
        let cfg = self.config().clone();
        let phase = phase_of(&cfg, e);
        if phase == 2 && self.state.calibration.is_none() {
            self.begin_phase2()?;
        }
        let mut order = self.train.clone();
        order.shuffle(&mut rng::stream(cfg.seed, rng::DATA_ORDER, e as u64));
        let mut eps_rng = rng::stream(cfg.seed, rng::REPARAM, e as u64);
        let mut gumbel_rng = rng::stream(cfg.seed, rng::GUMBEL, e as u64);
        let (d, k) = (cfg.model.d, cfg.model.k);
        let mut log = EpochLog {
            epoch: e,
            phase,
            ..EpochLog::default()
        };
        for batch in order.chunks(cfg.optim.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let x = self.data.batch(batch);
            let noise = BatchNoise {
                eps: sample_normal(&mut eps_rng, batch.len(), d),
                gumbel: sample_gumbel(&mut gumbel_rng, batch.len(), k),
            };
            let losses = self.step(&x, &noise, phase)?;
            log.steps += 1;
            log.total += losses[0];
            log.recon += losses[1];
            log.consistency += losses[2];
            log.kl += losses[3];
            log.mi += losses[4];
            log.usage += losses[5];
            log.hinge += losses[6];
            self.state.recon_since_interval += losses[1];
            self.state.batches_since_interval += 1;
            if self
                .state
                .step
                .is_multiple_of(cfg.calibration.k_diag as u64)
            {
                self.evaluate_diagnostics(phase)?;
            }
        }
        if log.steps > 0 {
            let n = log.steps as f64;
            for v in [
                &mut log.total,
                &mut log.recon,
                &mut log.consistency,
                &mut log.kl,
                &mut log.mi,
                &mut log.usage,
                &mut log.hinge,
            ] {
                *v /= n;
            }
        }
        self.state.epochs.push(log);
        if phase == 2 {
            self.end_phase2_epoch(e - cfg.optim.epochs_phase1);
        }
        self.state.epoch += 1;
        Ok(())
    }

    fn end_phase2_epoch(&mut self, phase_epoch: usize) {
        let state = &mut self.state;
        let cal = state.calibration.as_mut().expect("calibrated");
        if phase_epoch >= cal.freeze_epochs && state.window.is_initialized() {
            let f = active_fraction(&state.window, cal.c);
            let before = cal.c;
            cal.update(f);
            state.calibration_history.push(CalibrationEvent {
                epoch: state.epoch,
                f_active: f,
                c_before: before,
                c_after: cal.c,
            });
        }
        state.window.reset();
    }

    /// One optimiser step. Returns `[total, recon, α·cons, β·KL, MI, usage, hinge]`.
    fn step(&mut self, x: &Array, noise: &BatchNoise, phase: u8) -> Result<[f64; 7]> {
        let cfg = &self.state.config;
        let stage = if phase == 1 { "phase1" } else { "phase2" };
        let mut g = Graph::new();
        let xn = g.input(x.clone());
        let fwd = self
            .model
            .forward_on_graph(&mut g, xn, noise, cfg.model.tau)?;
        let losses = self.model.phase1_loss_on_graph(
            &mut g,
            xn,
            &fwd,
            &cfg.loss,
            cfg.model.mi_grad_into_decoder,
        )?;
        let mut total = losses.total;
        let mut hinge = 0.0;
        if phase == 2 && cfg.loss.lambda_unc > 0.0 {
            let c = self.state.calibration.as_ref().expect("calibrated").c;
            let m = cfg.calibration.hinge_samples.min(x.rows());
            let t = g.slice(fwd.t, 0, 0, m)?;
            let zhat = g.slice(fwd.enc.zhat, 0, 0, m)?;
            let embed = g.slice(fwd.embed, 0, 0, m)?;
            let terms = diagnostics::pair_terms_on_graph(&self.model, &mut g, t, zhat, embed)?;
            let h = diagnostics::hinge_on_graph(&mut g, &terms, c, cfg.loss.lambda_unc)?;
            hinge = g.value(h).item();
            total = g.add(total, h)?;
        }
        let step = self.state.step + 1;
        let value = g.value(total).item();
        if !value.is_finite() {
            return Err(Error::Numerical {
                stage: stage.into(),
                step,
                detail: format!(
                    "loss = {value} (recon {}, consistency {}, kl {}, mi {}, usage {}, hinge {hinge})",
                    g.value(losses.recon).item(),
                    g.value(losses.consistency).item(),
                    g.value(losses.kl).item(),
                    g.value(losses.mi).item(),
                    g.value(losses.usage).item(),
                ),
            });
        }
        let grads = g.backward(total)?.named();
        if let Some((name, _)) = grads.iter().find(|(_, a)| !a.all_finite()) {
            return Err(Error::Numerical {
                stage: stage.into(),
                step,
                detail: format!("non-finite gradient for {name}"),
            });
        }
        let adam = self.adam();
        self.model.params.adam_update(&grads, &adam)?;
        self.state.step = step;
        Ok([
            value,
            g.value(losses.recon).item(),
            g.value(losses.consistency).item(),
            g.value(losses.kl).item(),
            g.value(losses.mi).item(),
            g.value(losses.usage).item(),
            hinge,
        ])
    }

    /// Sweep on the fixed diagnostic batch with fresh noise for this step.
    pub fn diagnostic_sweep(&self, step: u64) -> Result<Sweep> {
        let cfg = self.config();
        let mut eps_rng = rng::stream(cfg.seed, rng::DIAGNOSTICS, 2 * step);
        let mut gumbel_rng = rng::stream(cfg.seed, rng::DIAGNOSTICS, 2 * step + 1);
        let b = self.diag_x.rows();
        let draws = cfg.calibration.diag_draws;
        let p = diagnostics::pair_count(cfg.model.d);
        let mut acc = Sweep {
            dev: vec![0.0; p],
            delta: vec![0.0; p],
        };
        for _ in 0..draws {
            let noise = BatchNoise {
                eps: sample_normal(&mut eps_rng, b, cfg.model.d),
                gumbel: sample_gumbel(&mut gumbel_rng, b, cfg.model.k),
            };
            let s = diagnostics::sweep(&self.model, &self.diag_x, &noise, cfg.model.tau)?;
            for (a, v) in acc.dev.iter_mut().zip(&s.dev) {
                *a += v / draws as f64;
            }
            for (a, v) in acc.delta.iter_mut().zip(&s.delta) {
                *a += v / draws as f64;
            }
        }
        Ok(acc)
    }

    fn evaluate_diagnostics(&mut self, phase: u8) -> Result<()> {
        let step = self.state.step;
        let sweep = self.diagnostic_sweep(step)?;
        if sweep.dev.iter().chain(&sweep.delta).any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                stage: "diagnostics".into(),
                step,
                detail: format!("non-finite pair statistics: {sweep:?}"),
            });
        }
        let cfg = self.state.config.clone();
        let eps = cfg.calibration.eps_num;
        let pair_list = pairs(cfg.model.d);
        let state = &mut self.state;
        for (k, &(i, j)) in pair_list.iter().enumerate() {
            let (dv, dl) = (sweep.dev[k], sweep.delta[k]);
            if phase == 1 {
                state.phase1_stats.accumulate(i, j, dv, dl)?;
            } else {
                state.phase2_stats.accumulate(i, j, dv, dl)?;
                state.window.accumulate(i, j, dv, dl)?;
            }
        }
        let (c, f_active, stats) = if phase == 1 {
            let ratios = scale_ratios(&state.phase1_stats, eps)?;
            let c = calibrate_c(
                &ratios,
                cfg.calibration.percentile,
                cfg.calibration.c_min,
                cfg.calibration.c_max,
            )?;
            (
                c,
                active_fraction(&state.phase1_stats, c),
                &state.phase1_stats,
            )
        } else {
            let c = state.calibration.as_ref().expect("calibrated").c;
            (c, active_fraction(&state.window, c), &state.phase2_stats)
        };
        let mut r_sum = 0.0;
        let mut scaled_sum = 0.0;
        for (k, e) in stats.entries().iter().enumerate() {
            let (dv, dl) = (sweep.dev[k], sweep.delta[k]);
            let stability = dl / (c * dv + eps);
            r_sum += stability;
            scaled_sum += c * dv;
            state.diagnostics.push(DiagnosticRow {
                step,
                phase,
                i: e.i,
                j: e.j,
                dev: dv,
                delta: dl,
                d_mean: e.d_mean,
                delta_mean: e.delta_mean,
                r: e.delta_mean / (e.d_mean + eps),
                c,
                stability,
                f_active,
            });
        }
        let p = pair_list.len() as f64;
        let recon = if state.batches_since_interval > 0 {
            state.recon_since_interval / state.batches_since_interval as f64
        } else {
            0.0
        };
        state.intervals.push(IntervalRow {
            step,
            epoch: state.epoch,
            phase,
            delta_bar: sweep.delta.iter().sum::<f64>() / p,
            scaled_dev: scaled_sum / p,
            r_bar: r_sum / p,
            recon,
            c,
            f_active,
        });
        state.recon_since_interval = 0.0;
        state.batches_since_interval = 0;
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.state, &self.model.params)
    }

    /// Final metrics and the per-pair summary.
    pub fn report(&self) -> Result<Report> {
        let cfg = self.config();
        let recon_eval = evalmetrics::reconstruction_error(&self.model, &self.data, &self.eval)?;
        let (factors, discrete) = evalmetrics::factor_table(&self.data);
        let latents =
            evalmetrics::model_latents(&self.model, &self.data, cfg.eval.fvm_include_discrete)?;
        let fvm = evalmetrics::fvm_score(
            &latents,
            &factors,
            &discrete,
            &FvmOptions {
                votes: cfg.eval.fvm_votes,
                samples_per_vote: cfg.eval.fvm_samples_per_vote,
                bins: cfg.eval.fvm_bins,
                seed: cfg.seed,
            },
        )?;
        let mut report = self.partial_report();
        report.recon.eval = Some(recon_eval);
        report.fvm = Some(fvm);
        Ok(report)
    }

    /// Report without the final evaluation metrics.
    pub fn partial_report(&self) -> Report {
        let cfg = self.config();
        let s = &self.state;
        let eps = cfg.calibration.eps_num;
        let phase2_ran = s.epoch > cfg.optim.epochs_phase1;
        let (stats, c) = match (&s.calibration, phase2_ran) {
            (Some(cal), true) => (&s.phase2_stats, Some(cal.c)),
            _ => {
                let c = scale_ratios(&s.phase1_stats, eps).ok().and_then(|r| {
                    calibrate_c(
                        &r,
                        cfg.calibration.percentile,
                        cfg.calibration.c_min,
                        cfg.calibration.c_max,
                    )
                    .ok()
                });
                (&s.phase1_stats, c)
            }
        };
        let pairs = stats
            .entries()
            .iter()
            .map(|e| PairReport {
                i: e.i,
                j: e.j,
                d_mean: e.d_mean,
                delta_mean: e.delta_mean,
                r: e.delta_mean / (e.d_mean + eps),
                stability: c.map(|c| e.delta_mean / (c * e.d_mean + eps)),
                count: e.count,
            })
            .collect();
        let r_bar = c
            .filter(|_| stats.is_initialized())
            .map(|c| diagnostics::stability_ratio(stats, c, eps).1);
        let last_epoch = |phase: u8| {
            s.epochs
                .iter()
                .rev()
                .find(|l| l.phase == phase)
                .map(|l| l.recon)
        };
        Report {
            status: "completed".into(),
            failure: None,
            seed: cfg.seed,
            dataset_checksum: s.dataset_checksum.clone(),
            epochs_phase1: cfg.optim.epochs_phase1,
            epochs_phase2: cfg.optim.epochs_phase2,
            epochs_completed: s.epoch,
            steps: s.step,
            phase2_skipped: cfg.optim.epochs_phase2 == 0,
            calibration: s.calibration.as_ref().map(|cal| CalibrationSummary {
                c_emp: cal.c_emp,
                c_final: cal.c,
                c_min: cal.c_min,
                c_max: cal.c_max,
                history: s.calibration_history.clone(),
            }),
            provisional_c: if phase2_ran { None } else { c },
            pairs,
            r_bar,
            f_active: s.intervals.last().map(|r| r.f_active),
            recon: ReconSummary {
                phase1_final_epoch: last_epoch(1),
                phase2_final_epoch: last_epoch(2),
                eval: None,
            },
            fvm: None,
            epochs: s.epochs.clone(),
        }
    }

    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from(DIAGNOSTICS_HEADER);
        out.push('\n');
        for r in &self.state.diagnostics {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.phase,
                r.i,
                r.j,
                r.dev,
                r.delta,
                r.d_mean,
                r.delta_mean,
                r.r,
                r.c,
                r.stability,
                r.f_active
            );
        }
        out
    }

    pub fn phases_csv(&self) -> String {
        let mut out = String::from(PHASES_HEADER);
        out.push('\n');
        for r in &self.state.intervals {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                r.epoch,
                r.phase,
                r.delta_bar,
                r.scaled_dev,
                r.r_bar,
                r.recon,
                r.c,
                r.f_active
            );
        }
        out
    }

    /// Writes the CSV series and, when given, the report into `dir`.
    pub fn write_outputs(&self, dir: &Path, report: Option<&Report>) -> Result<()> {
        write_atomic(
            &dir.join(DIAGNOSTICS_FILE),
            self.diagnostics_csv().as_bytes(),
        )?;
        write_atomic(&dir.join(PHASES_FILE), self.phases_csv().as_bytes())?;
        if let Some(r) = report {
            r.save(&dir.join(REPORT_FILE))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub i: usize,
    pub j: usize,
    pub d_mean: f64,
    pub delta_mean: f64,
    pub r: f64,
    /// `Δ̄/(C·D̄ + ε)` with the final (or provisional) `C`.
    pub stability: Option<f64>,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub c_emp: f64,
    pub c_final: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub history: Vec<CalibrationEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconSummary {
    /// Mean training reconstruction loss of the last phase-1 epoch.
    pub phase1_final_epoch: Option<f64>,
    pub phase2_final_epoch: Option<f64>,
    /// Held-out reconstruction error of the final model.
    pub eval: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub step: Option<u64>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub status: String,
    pub failure: Option<Failure>,
    pub seed: u64,
    pub dataset_checksum: String,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub epochs_completed: usize,
    pub steps: u64,
    pub phase2_skipped: bool,
    pub calibration: Option<CalibrationSummary>,
    /// Phase-1 estimate of `C` when phase 2 has not run.
    pub provisional_c: Option<f64>,
    pub pairs: Vec<PairReport>,
    pub r_bar: Option<f64>,
    pub f_active: Option<f64>,
    pub recon: ReconSummary,
    pub fvm: Option<FvmResult>,
    pub epochs: Vec<EpochLog>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json();
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Rebuilds the model described by `cfg` around checkpointed parameters.
pub fn model_with_params(cfg: &TrainConfig, params: ParameterSet) -> Result<Model> {
    let mut model = Model::init(&cfg.model, cfg.image_pixels(), cfg.seed)?;
    for (name, p) in model.params.iter() {
        match params.entry(name) {
            Some(q) if q.value.shape() == p.value.shape() => {}
            _ => {
                return Err(Error::dim(format!(
                    "checkpoint parameter {name} is missing or has the wrong shape"
                )))
            }
        }
    }
    if params.len() != model.params.len() {
        return Err(Error::dim("checkpoint has unexpected parameters"));
    }
    model.params = params;
    Ok(model)
}

/// The `C` in force: the calibrated value once phase 2 has begun, otherwise
/// the phase-1 percentile estimate when any diagnostics exist.
pub fn current_c(state: &RunState) -> Option<f64> {
    if let Some(cal) = &state.calibration {
        return Some(cal.c);
    }
    let cal = &state.config.calibration;
    scale_ratios(&state.phase1_stats, cal.eps_num)
        .ok()
        .and_then(|r| calibrate_c(&r, cal.percentile, cal.c_min, cal.c_max).ok())
}

/// Loads `cfg.data.path` when set, otherwise generates the dataset.
pub fn load_or_generate(cfg: &TrainConfig) -> Result<Dataset> {
    match &cfg.data.path {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "data.path {} does not exist",
                    path.display()
                )));
            }
            Dataset::load(path)
        }
        None => Dataset::generate(cfg.data.count, cfg.data.side, cfg.data.seed),
    }
}

/// Runs Phase 1 only and returns the trainer positioned at its end.
pub fn train_phase1(cfg: TrainConfig, data: Dataset) -> Result<Trainer> {
    let mut t = Trainer::new(cfg, data)?;
    let end = t.config().optim.epochs_phase1;
    t.run_until(end)?;
    Ok(t)
}

/// Runs the remaining (Phase 2) epochs of a trainer.
pub fn train_phase2(trainer: &mut Trainer) -> Result<()> {
    trainer.run()
}

/// Dataset, both phases, final evaluation and all run-directory outputs.
/// On failure a report carrying the failing stage is still written.
pub fn run_curriculum(cfg: &TrainConfig, out_dir: &Path) -> Result<Report> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    write_atomic(&out_dir.join(CONFIG_FILE), cfg.to_toml_string().as_bytes())?;
    let data = load_or_generate(cfg)?;
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    let outcome = trainer.run().and_then(|_| trainer.report());
    match outcome {
        Ok(report) => {
            trainer.save_checkpoint(&out_dir.join(CHECKPOINT_FILE))?;
            trainer.write_outputs(out_dir, Some(&report))?;
            Ok(report)
        }
        Err(err) => {
            let mut report = trainer.partial_report();
            report.status = "failed".into();
            report.failure = Some(match &err {
                Error::Numerical {
                    stage,
                    step,
                    detail,
                } => Failure {
                    stage: stage.clone(),
                    step: Some(*step),
                    detail: detail.clone(),
                },
                other => Failure {
                    stage: if trainer.state.epoch < trainer.total_epochs() {
                        format!("phase{}", phase_of(trainer.config(), trainer.state.epoch))
                    } else {
                        "evaluation".into()
                    },
                    step: Some(trainer.state.step),
                    detail: other.to_string(),
                },
            });
            trainer.write_outputs(out_dir, Some(&report))?;
            Err(err)
        }
    }
}

/// Resumes a run directory's checkpoint and finishes it in `out_dir`.
pub fn resume_curriculum(checkpoint_path: &Path, out_dir: &Path) -> Result<Report> {
    let (state, params) = checkpoint::load::<RunState>(checkpoint_path)?;
    let data = load_or_generate(&state.config)?;
    let mut trainer = Trainer::resume(data, state, params)?;
    std::fs::create_dir_all(out_dir)?;
    write_atomic(
        &out_dir.join(CONFIG_FILE),
        trainer.config().to_toml_string().as_bytes(),
    )?;
    trainer.run()?;
    let report = trainer.report()?;
    trainer.save_checkpoint(&out_dir.join(CHECKPOINT_FILE))?;
    trainer.write_outputs(out_dir, Some(&report))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.seed = 3;
        cfg.data.count = 160;
        cfg.data.eval_count = 32;
        cfg.data.side = 12;
        cfg.model.hidden = 16;
        cfg.model.group_hidden = 8;
        cfg.model.d = 3;
        cfg.model.n = 3;
        cfg.optim.batch_size = 32;
        cfg.optim.epochs_phase1 = 2;
        cfg.optim.epochs_phase2 = 2;
        cfg.calibration.k_diag = 2;
        cfg.calibration.diag_batch = 8;
        cfg.calibration.freeze_epochs = 1;
        cfg.eval.fvm_votes = 50;
        cfg.eval.fvm_samples_per_vote = 8;
        cfg
    }

    fn data(cfg: &TrainConfig) -> Dataset {
        load_or_generate(cfg).unwrap()
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let mut cfg = small_config();
        cfg.optim.epochs_phase1 = 0;
        cfg.optim.epochs_phase2 = 0;
        let fresh = Model::init(&cfg.model, cfg.image_pixels(), cfg.seed).unwrap();
        let t = train_phase1(cfg.clone(), data(&cfg)).unwrap();
        assert_eq!(t.model, fresh);
        assert!(t.state.phase1_stats.entries().iter().all(|e| e.count == 0));
    }

    #[test]
    fn phase2_without_phase1_statistics_is_an_invalid_state() {
        let mut cfg = small_config();
        cfg.optim.epochs_phase1 = 0;
        let mut t = Trainer::new(cfg.clone(), data(&cfg)).unwrap();
        assert!(matches!(t.run(), Err(Error::InvalidState(_))));
    }

    #[test]
    fn calibration_stays_in_bounds_and_freeze_holds() {
        let mut cfg = small_config();
        cfg.optim.epochs_phase2 = 3;
        cfg.calibration.freeze_epochs = 3;
        let mut t = Trainer::new(cfg.clone(), data(&cfg)).unwrap();
        t.run().unwrap();
        let cal = t.state.calibration.clone().unwrap();
        assert_eq!(cal.c, cal.c_emp);
        assert!(t.state.calibration_history.is_empty());
        for r in t.state.intervals.iter().filter(|r| r.phase == 2) {
            assert_eq!(r.c, cal.c_emp);
        }

        cfg.calibration.freeze_epochs = 0;
        cfg.calibration.eta_c = 50.0;
        cfg.calibration.c_max = cal.c_emp * 1.5;
        cfg.calibration.f_target = 1.0;
        let mut t = Trainer::new(cfg.clone(), data(&cfg)).unwrap();
        t.run().unwrap();
        assert_eq!(t.state.calibration_history.len(), 3);
        for r in t.state.intervals.iter().filter(|r| r.phase == 2) {
            assert!(r.c >= cfg.calibration.c_min && r.c <= cfg.calibration.c_max);
        }
        assert_eq!(t.state.calibration.unwrap().c, cfg.calibration.c_max);
    }

    #[test]
    fn phase_transition_preserves_parameters() {
        let cfg = small_config();
        let mut t = train_phase1(cfg.clone(), data(&cfg)).unwrap();
        let before = t.model.clone();
        let x = t.dataset().batch(&[0, 1, 2, 3]);
        let (a, _) = before.reconstruct_eval(&x).unwrap();
        t.begin_phase2().unwrap();
        let (b, _) = t.model.reconstruct_eval(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(t.model, before);
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let cfg = small_config();
        let mut full = Trainer::new(cfg.clone(), data(&cfg)).unwrap();
        full.run().unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.bin");
        let mut first = Trainer::new(cfg.clone(), data(&cfg)).unwrap();
        first.run_until(3).unwrap();
        first.save_checkpoint(&path).unwrap();
        let mut second = Trainer::load_checkpoint(&path, data(&cfg)).unwrap();
        second.run().unwrap();
        assert_eq!(second.model, full.model);
        assert_eq!(second.diagnostics_csv(), full.diagnostics_csv());
        assert_eq!(second.phases_csv(), full.phases_csv());
        assert_eq!(second.state, full.state);
    }

    #[test]
    fn resume_rejects_a_different_dataset() {
        let cfg = small_config();
        let t = Trainer::new(cfg.clone(), data(&cfg)).unwrap();
        let other = Dataset::generate(cfg.data.count, cfg.data.side, 99).unwrap();
        assert!(Trainer::resume(other, t.state.clone(), t.model.params.clone()).is_err());
    }

    #[test]
    fn csv_headers_and_row_counts() {
        let cfg = small_config();
        let mut t = Trainer::new(cfg.clone(), data(&cfg)).unwrap();
        t.run().unwrap();
        let diag = t.diagnostics_csv();
        let mut lines = diag.lines();
        assert_eq!(lines.next(), Some(DIAGNOSTICS_HEADER));
        assert_eq!(lines.count(), t.state.intervals.len() * 3);
        assert!(t.phases_csv().starts_with(PHASES_HEADER));
        let report = t.report().unwrap();
        assert_eq!(report.pairs.len(), 3);
        assert!(report.fvm.is_some());
    }
}
