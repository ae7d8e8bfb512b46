// SPDX-License-Identifier: Apache-2.0

#![allow(clippy::field_reassign_with_default)]

use ncvae::config::TrainConfig;
use ncvae::liegroup::GeneratorBank;
use ncvae::matcore::DenseMatrix;
use ncvae::toydata::Dataset;
use ncvae::trainer::{self, Report, Trainer};
use ncvae::Error;

fn small() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = 11;
    cfg.data.count = 192;
    cfg.data.side = 12;
    cfg.data.eval_count = 32;
    cfg.model.d = 3;
    cfg.model.n = 3;
    cfg.model.hidden = 24;
    cfg.model.group_hidden = 12;
    cfg.optim.batch_size = 32;
    cfg.optim.epochs_phase1 = 2;
    cfg.optim.epochs_phase2 = 2;
    cfg.calibration.k_diag = 2;
    cfg.calibration.diag_batch = 16;
    cfg.calibration.freeze_epochs = 0;
    cfg.eval.fvm_votes = 40;
    cfg.eval.fvm_samples_per_vote = 16;
    cfg
}

fn data(cfg: &TrainConfig) -> Dataset {
    trainer::load_or_generate(cfg).unwrap()
}

#[test]
fn phase1_recon_decreases_from_epoch_one_to_two() {
    let mut cfg = TrainConfig::default();
    cfg.data.count = 512 + cfg.data.eval_count;
    cfg.optim.epochs_phase1 = 2;
    cfg.optim.epochs_phase2 = 0;
    let t = trainer::train_phase1(cfg.clone(), data(&cfg)).unwrap();
    let logs = &t.state.epochs;
    assert_eq!(logs.len(), 2);
    assert!(
        logs[1].recon < logs[0].recon,
        "epoch recon {} then {}",
        logs[0].recon,
        logs[1].recon
    );
}

#[test]
fn same_seed_gives_identical_runs() {
    let cfg = small();
    let mut a = Trainer::new(cfg.clone(), data(&cfg)).unwrap();
    let mut b = Trainer::new(cfg.clone(), data(&cfg)).unwrap();
    a.run().unwrap();
    b.run().unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.diagnostics_csv(), b.diagnostics_csv());
    assert_eq!(a.report().unwrap(), b.report().unwrap());
}

#[test]
fn disabled_hinge_matches_continued_phase1() {
    let mut with_phase2 = small();
    with_phase2.loss.lambda_unc = 0.0;
    let mut phase1_only = small();
    phase1_only.optim.epochs_phase1 = 4;
    phase1_only.optim.epochs_phase2 = 0;
    let mut a = Trainer::new(with_phase2.clone(), data(&with_phase2)).unwrap();
    let mut b = Trainer::new(phase1_only.clone(), data(&phase1_only)).unwrap();
    a.run().unwrap();
    b.run().unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert!(a.state.calibration.is_some());
}

#[test]
fn commuting_generators_never_activate_the_hinge() {
    let mut cfg = small();
    cfg.optim.lr = 1e-12;
    cfg.loss.lambda_unc = 10.0;
    let mut t = Trainer::new(cfg.clone(), data(&cfg)).unwrap();
    let n = cfg.model.n;
    let diag = |k: usize| {
        let mut m = DenseMatrix::zeros(n, n);
        for r in 0..n {
            m.set(r, r, 0.2 * (k + 1) as f64 * (r as f64 - 1.0));
        }
        m
    };
    let bank = GeneratorBank::new((0..cfg.model.d).map(diag).collect()).unwrap();
    t.model.set_generator_bank(&bank).unwrap();
    t.run().unwrap();
    assert!(t.state.diagnostics.iter().all(|r| r.dev < 1e-10));
    for log in t.state.epochs.iter().filter(|l| l.phase == 2) {
        assert!(log.hinge < 1e-20, "hinge {}", log.hinge);
    }
}

#[test]
fn run_directory_contents() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let report = trainer::run_curriculum(&cfg, dir.path()).unwrap();
    assert_eq!(report.status, "completed");
    assert_eq!(report.pairs.len(), 3);
    for p in &report.pairs {
        assert!(p.stability.is_some());
        assert!(p.count > 0);
    }
    let cal = report.calibration.as_ref().unwrap();
    assert!(cal.c_final >= cal.c_min && cal.c_final <= cal.c_max);
    assert!(cal.c_emp >= cal.c_min && cal.c_emp <= cal.c_max);
    for f in [
        trainer::CONFIG_FILE,
        trainer::CHECKPOINT_FILE,
        trainer::DIAGNOSTICS_FILE,
        trainer::PHASES_FILE,
        trainer::REPORT_FILE,
    ] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let loaded = Report::load(&dir.path().join(trainer::REPORT_FILE)).unwrap();
    assert_eq!(loaded, report);
    let echoed = TrainConfig::load(&dir.path().join(trainer::CONFIG_FILE)).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn phase1_only_run_marks_phase2_skipped() {
    let mut cfg = small();
    cfg.optim.epochs_phase2 = 0;
    let dir = tempfile::tempdir().unwrap();
    let report = trainer::run_curriculum(&cfg, dir.path()).unwrap();
    assert!(report.phase2_skipped);
    assert!(report.calibration.is_none());
    assert!(report.provisional_c.is_some());
    assert!(report.recon.phase2_final_epoch.is_none());
}

#[test]
fn resumed_run_matches_uninterrupted_outputs() {
    let cfg = small();
    let full_dir = tempfile::tempdir().unwrap();
    let full = trainer::run_curriculum(&cfg, full_dir.path()).unwrap();

    let mut partial = Trainer::new(cfg.clone(), data(&cfg)).unwrap();
    partial.run_until(1).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("epoch1.bin");
    partial.save_checkpoint(&ckpt).unwrap();
    let resumed_dir = tmp.path().join("resumed");
    let resumed = trainer::resume_curriculum(&ckpt, &resumed_dir).unwrap();
    assert_eq!(resumed, full);
    for f in [
        trainer::DIAGNOSTICS_FILE,
        trainer::PHASES_FILE,
        trainer::CHECKPOINT_FILE,
    ] {
        assert_eq!(
            std::fs::read(full_dir.path().join(f)).unwrap(),
            std::fs::read(resumed_dir.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn divergence_aborts_with_a_failure_report() {
    let mut cfg = small();
    cfg.model.init_scale = 1e4;
    let dir = tempfile::tempdir().unwrap();
    let err = trainer::run_curriculum(&cfg, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Numerical { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
    let report = Report::load(&dir.path().join(trainer::REPORT_FILE)).unwrap();
    assert_eq!(report.status, "failed");
    let failure = report.failure.unwrap();
    assert_eq!(failure.stage, "phase1");
    assert_eq!(failure.step, Some(1));
}
