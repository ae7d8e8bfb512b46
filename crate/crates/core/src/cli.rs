// SPDX-License-Identifier: Apache-2.0

//! Command-line entry points. Every command reads its inputs and writes new
//! files; datasets and checkpoints are never modified in place.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::diagnostics::{self, pairs};
use crate::error::{Error, Result};
use crate::model::{sample_gumbel, sample_normal, BatchNoise};
use crate::rng;
use crate::toydata::{write_atomic, Dataset};
use crate::trainer::{self, Report, RunState, PHASES_FILE, REPORT_FILE};

pub const PANEL_TOP_FILE: &str = "panel_top.csv";
pub const PANEL_MIDDLE_FILE: &str = "panel_middle.csv";
pub const PANEL_BOTTOM_FILE: &str = "panel_bottom.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

pub const DIAGNOSE_HEADER: &str = "i,j,Dbar,Deltabar,r,C,R,U_mean,U_max";

#[derive(Debug, Parser)]
#[command(
    name = "ncvae",
    version,
    about = "Non-commutative Lie-group VAE toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the procedural shapes dataset to a file.
    GenerateData {
        #[arg(long, default_value_t = 2048)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        side: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the two-phase curriculum.
    Train {
        /// TOML config; defaults apply to omitted keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Per-pair diagnostics of a checkpoint on a dataset.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `all` or a single pair `i,j`.
        #[arg(long, default_value = "all")]
        pairs: String,
        /// Number of leading images to evaluate.
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot-ready series and a summary table from a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenerateData {
            count,
            side,
            seed,
            out,
        } => {
            let data = Dataset::generate(count, side, seed)?;
            data.save(&out)?;
            println!("{}", data.checksum());
            Ok(())
        }
        Command::Train {
            config,
            out_dir,
            resume,
        } => {
            let report = match resume {
                Some(ckpt) => trainer::resume_curriculum(&ckpt, &out_dir)?,
                None => {
                    let mut cfg = match config {
                        Some(path) => TrainConfig::load(&path)?,
                        None => TrainConfig::default(),
                    };
                    cfg.apply_env()?;
                    cfg.validate()?;
                    trainer::run_curriculum(&cfg, &out_dir)?
                }
            };
            print!("{}", summary_text(&report));
            Ok(())
        }
        Command::Diagnose {
            checkpoint,
            data,
            pairs,
            samples,
            out,
        } => {
            let (state, params) = checkpoint::load::<RunState>(&checkpoint)?;
            let data = Dataset::load(&data)?;
            let selection = parse_pairs(&pairs, state.config.model.d)?;
            let csv = diagnose(&state, params, &data, &selection, samples)?;
            write_atomic(&out, csv.as_bytes())
        }
        Command::Report { run_dir, out } => render_report(&run_dir, &out),
    }
}

/// `all`, or `i,j` with `i < j < d`.
pub fn parse_pairs(spec: &str, d: usize) -> Result<Vec<(usize, usize)>> {
    if spec.trim() == "all" {
        return Ok(pairs(d));
    }
    let parsed: Vec<usize> = spec
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidInput(format!("--pairs {spec}: expected `all` or `i,j`")))?;
    match parsed[..] {
        [i, j] if i < j && j < d => Ok(vec![(i, j)]),
        _ => Err(Error::InvalidInput(format!(
            "--pairs {spec}: need i < j < {d}"
        ))),
    }
}

/// Per-pair `D̄`, `Δ̄`, `r`, `R` and manifold sensitivity on the first
/// `samples` images, one noise draw from a fixed stream.
pub fn diagnose(
    state: &RunState,
    params: crate::gradcore::ParameterSet,
    data: &Dataset,
    selection: &[(usize, usize)],
    samples: usize,
) -> Result<String> {
    let cfg = &state.config;
    if data.side() != cfg.data.side {
        return Err(Error::Config(format!(
            "dataset side {} does not match the checkpoint's data.side = {}",
            data.side(),
            cfg.data.side
        )));
    }
    let model = trainer::model_with_params(cfg, params)?;
    let m = samples.min(data.len());
    if m == 0 {
        return Err(Error::InvalidInput("no images to diagnose".into()));
    }
    let indices: Vec<usize> = (0..m).collect();
    let mut eps_rng = rng::stream(cfg.seed, rng::DIAGNOSTICS, u64::MAX - 2);
    let mut gumbel_rng = rng::stream(cfg.seed, rng::DIAGNOSTICS, u64::MAX - 1);
    let all = pairs(cfg.model.d);
    let mut dev = vec![0.0; all.len()];
    let mut delta = vec![0.0; all.len()];
    let mut u_sum = vec![0.0; selection.len()];
    let mut u_max = vec![0.0f64; selection.len()];
    for chunk in indices.chunks(cfg.calibration.diag_batch.max(1)) {
        let x = data.batch(chunk);
        let noise = BatchNoise {
            eps: sample_normal(&mut eps_rng, chunk.len(), cfg.model.d),
            gumbel: sample_gumbel(&mut gumbel_rng, chunk.len(), cfg.model.k),
        };
        let s = diagnostics::sweep(&model, &x, &noise, cfg.model.tau)?;
        let w = chunk.len() as f64 / m as f64;
        for k in 0..all.len() {
            dev[k] += w * s.dev[k];
            delta[k] += w * s.delta[k];
        }
        for (q, &(i, j)) in selection.iter().enumerate() {
            for u in diagnostics::manifold_sensitivity(&model, &x, i, j, cfg.eval.fd_step)? {
                u_sum[q] += u;
                u_max[q] = u_max[q].max(u);
            }
        }
    }
    let c = trainer::current_c(state);
    let eps = cfg.calibration.eps_num;
    let mut out = String::from(DIAGNOSE_HEADER);
    out.push('\n');
    for (q, &(i, j)) in selection.iter().enumerate() {
        let k = all
            .iter()
            .position(|p| *p == (i, j))
            .expect("pair in range");
        let (dv, dl) = (dev[k], delta[k]);
        let (c_text, stability) = match c {
            Some(c) => (c.to_string(), (dl / (c * dv + eps)).to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "{i},{j},{dv},{dl},{},{c_text},{stability},{},{}",
            dl / (dv + eps),
            u_sum[q] / m as f64,
            u_max[q]
        );
    }
    Ok(out)
}

/// Data rows of `phases.csv`, split into columns.
fn read_phases(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(trainer::PHASES_HEADER) {
        return Err(Error::Format(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    Ok(lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

/// Plain-text summary table of a run.
pub fn summary_text(report: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "status        {}", report.status);
    if let Some(f) = &report.failure {
        let _ = writeln!(
            s,
            "failure       {} at step {:?}: {}",
            f.stage, f.step, f.detail
        );
    }
    let _ = writeln!(s, "seed          {}", report.seed);
    let _ = writeln!(
        s,
        "epochs        {} + {}{}",
        report.epochs_phase1,
        report.epochs_phase2,
        if report.phase2_skipped {
            " (phase 2 skipped)"
        } else {
            ""
        }
    );
    let _ = writeln!(s, "Recon         {}", fmt_opt(report.recon.eval));
    let _ = writeln!(
        s,
        "FVM           {}",
        fmt_opt(report.fvm.as_ref().map(|f| f.score))
    );
    let _ = writeln!(
        s,
        "recon P1 end  {}",
        fmt_opt(report.recon.phase1_final_epoch)
    );
    let _ = writeln!(
        s,
        "recon P2 end  {}",
        fmt_opt(report.recon.phase2_final_epoch)
    );
    let cal = report.calibration.as_ref();
    let _ = writeln!(s, "C_emp         {}", fmt_opt(cal.map(|c| c.c_emp)));
    let _ = writeln!(
        s,
        "C final       {}",
        fmt_opt(cal.map(|c| c.c_final).or(report.provisional_c))
    );
    let _ = writeln!(s, "R_bar         {}", fmt_opt(report.r_bar));
    let _ = writeln!(s, "f_active      {}", fmt_opt(report.f_active));
    s
}

/// Writes the three panel series and `summary.txt` for a run directory.
pub fn render_report(run_dir: &Path, out: &Path) -> Result<()> {
    let phases_path = run_dir.join(PHASES_FILE);
    let report_path = run_dir.join(REPORT_FILE);
    for p in [&phases_path, &report_path] {
        if !p.is_file() {
            return Err(Error::InvalidInput(format!("missing {}", p.display())));
        }
    }
    let rows = read_phases(&phases_path)?;
    let report = Report::load(&report_path)?;
    // Columns: step,epoch,phase,delta_bar,scaled_dev,r_bar,recon,C,f_active
    let col = |r: &Vec<String>, k: usize| -> Result<String> {
        r.get(k)
            .cloned()
            .ok_or_else(|| Error::Format("short row in phases.csv".into()))
    };
    let mut top = String::from("step,delta_bar,scaled_dev\n");
    let mut middle = String::from("step,r_bar,boundary\n");
    let mut bottom = String::from("step,recon\n");
    for r in &rows {
        let step = col(r, 0)?;
        let _ = writeln!(top, "{step},{},{}", col(r, 3)?, col(r, 4)?);
        let _ = writeln!(middle, "{step},{},1", col(r, 5)?);
        let _ = writeln!(bottom, "{step},{}", col(r, 6)?);
    }
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join(PANEL_TOP_FILE), top.as_bytes())?;
    write_atomic(&out.join(PANEL_MIDDLE_FILE), middle.as_bytes())?;
    write_atomic(&out.join(PANEL_BOTTOM_FILE), bottom.as_bytes())?;
    write_atomic(&out.join(SUMMARY_FILE), summary_text(&report).as_bytes())
}
