use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dsm_core::gradcheck::{run_suite, DEFAULT_INSTANCES};
use dsm_core::io::{read_image, read_pfm, write_pfm, write_pgm_heatmap};
use dsm_core::loss::{valid_mask, DEFAULT_MAX_DISPARITY};
use dsm_core::params::{meta_value, read_checkpoint_file, META_DISPARITIES};
use dsm_core::train::history_csv;
use dsm_core::uncertainty::{LOGSCALE_MAX, LOGSCALE_MIN};
use dsm_core::{
    compute_metrics, match_pair, refine_disparity, sample_filter, split_metrics, Error, MapRole,
    MatcherConfig, MetricsReport, ParamSet, TrainConfig, Trainer,
};

#[derive(Parser)]
#[command(name = "dsm", version, about = "Stereo matching with entropy matchability")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate disparity for a rectified pair.
    Match {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// key=value configuration (same format as train-toy).
        #[arg(long)]
        config: PathBuf,
        /// Trained parameters. Without one the networks keep their initial
        /// weights.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out_disp: PathBuf,
        /// Entropy matchability map.
        #[arg(long)]
        out_match: Option<PathBuf>,
        /// Directory for 8-bit PGM views of the outputs.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
    },
    /// Score a disparity map against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Log-scale map; adds the matchable/unmatchable split.
        #[arg(long)]
        logscale: Option<PathBuf>,
        /// Ground truth above this is ignored.
        #[arg(long, default_value_t = DEFAULT_MAX_DISPARITY)]
        max_disp: f64,
        /// Also print a comma-separated header and line.
        #[arg(long)]
        csv: bool,
    },
    /// Train on synthetic pairs, checkpointing after every epoch.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: PathBuf,
    },
    /// Run only the refinement stage on an existing disparity map.
    Refine {
        #[arg(long)]
        disp: PathBuf,
        #[arg(long)]
        left: PathBuf,
        /// Entropy matchability map of the same pair.
        #[arg(long = "match")]
        matchability: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = dsm_core::refine::DEFAULT_ITERATIONS)]
        iters: usize,
        /// Configuration the checkpoint was trained with. Without it the
        /// disparity count is read from the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        /// Op name, or `all`.
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_params(ckpt: Option<&Path>, cfg: &MatcherConfig) -> Result<ParamSet> {
    match ckpt {
        Some(path) => ParamSet::load(path, cfg)
            .with_context(|| format!("loading checkpoint {}", path.display())),
        None => Ok(ParamSet::init(cfg, 0)),
    }
}

fn read_train_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn run_match(
    left: &Path,
    right: &Path,
    config: &Path,
    ckpt: Option<&Path>,
    out_disp: &Path,
    out_match: Option<&Path>,
    heatmaps: Option<&Path>,
) -> Result<()> {
    let cfg = read_train_config(config)?.matcher;
    let params = load_params(ckpt, &cfg)?;
    let l = read_image(left).with_context(|| format!("reading {}", left.display()))?;
    let r = read_image(right).with_context(|| format!("reading {}", right.display()))?;
    let out = match_pair(&l, &r, &cfg, &params)?;
    write_pfm(out_disp, &out.refined)?;
    if let Some(path) = out_match {
        write_pfm(path, &out.matchability)?;
    }
    if let Some(dir) = heatmaps {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let top = (cfg.disparities - 1) as f64;
        write_pgm_heatmap(&dir.join("initial.pgm"), &out.initial, (0.0, top))?;
        write_pgm_heatmap(&dir.join("refined.pgm"), &out.refined, (0.0, top))?;
        write_pgm_heatmap(
            &dir.join("matchability.pgm"),
            &out.matchability,
            (0.0, (cfg.disparities as f64).ln()),
        )?;
        write_pgm_heatmap(&dir.join("logscale.pgm"), &out.logscale, (LOGSCALE_MIN, LOGSCALE_MAX))?;
    }
    let matchable = out.logscale.data().iter().filter(|&&b| b < 0.0).count();
    println!(
        "{}x{} px, {} disparities, {:.1}% matchable",
        l.width(),
        l.height(),
        cfg.disparities,
        100.0 * matchable as f64 / out.logscale.len() as f64
    );
    Ok(())
}

fn run_eval(pred: &Path, gt: &Path, logscale: Option<&Path>, max_disp: f64, csv: bool) -> Result<()> {
    let d = read_pfm(pred).with_context(|| format!("reading {}", pred.display()))?;
    let g = read_pfm(gt).with_context(|| format!("reading {}", gt.display()))?;
    let mask = valid_mask(&g, max_disp);
    if !sample_filter(&g, &mask) {
        eprintln!("warning: fewer than 10% of the ground-truth pixels are valid");
    }
    let report: MetricsReport = match logscale {
        Some(path) => {
            let b = read_pfm(path)
                .with_context(|| format!("reading {}", path.display()))?
                .with_role(MapRole::LogScale);
            split_metrics(&d, &g, &b, &mask)?
        }
        None => compute_metrics(&d, &g, &mask)?,
    };
    println!("{report}");
    if csv {
        println!("{}", MetricsReport::CSV_HEADER);
        println!("{}", report.csv_line());
    }
    Ok(())
}

/// Writes next to `out` and renames, so an interrupted run never leaves a
/// torn checkpoint.
fn save_atomic(params: &ParamSet, cfg: &MatcherConfig, out: &Path) -> dsm_core::Result<()> {
    let tmp = out.with_extension("partial");
    params.save(&tmp, cfg)?;
    fs::rename(&tmp, out)?;
    Ok(())
}

fn run_train(config: &Path, seed: u64, out: &Path, history: &Path) -> Result<()> {
    let mut cfg = read_train_config(config)?;
    cfg.seed = seed;
    let matcher = cfg.matcher.clone();
    let mut trainer = Trainer::new(cfg)?;
    let result = trainer.run(|rec, params| {
        println!(
            "epoch {:>3}  l1_init {:.4}  joint {:.4}  l1_ref {:.4}  total {:.4}  epe {:.4}",
            rec.epoch, rec.loss.l1_init, rec.loss.joint, rec.loss.l1_refined, rec.loss.total, rec.epe
        );
        save_atomic(params, &matcher, out)
    });
    let write_history = |h: &[dsm_core::train::EpochRecord]| {
        fs::write(history, history_csv(h)).with_context(|| format!("writing {}", history.display()))
    };
    match result {
        Ok(h) => {
            let h = h.to_vec();
            if h.is_empty() {
                save_atomic(trainer.params(), &matcher, out)?;
            }
            write_history(&h)
        }
        Err(e @ Error::Diverged { .. }) => {
            save_atomic(trainer.params(), &matcher, out)?;
            write_history(trainer.history())?;
            bail!("{e}; last good parameters written to {}", out.display())
        }
        Err(e) => Err(e.into()),
    }
}

/// Configuration for `refine` when only a checkpoint is given.
fn config_from_checkpoint(ckpt: &Path) -> Result<MatcherConfig> {
    let records = read_checkpoint_file(ckpt)
        .with_context(|| format!("reading checkpoint {}", ckpt.display()))?;
    let Some(d) = meta_value(&records, META_DISPARITIES) else {
        bail!("checkpoint {} does not record its disparity count", ckpt.display());
    };
    Ok(MatcherConfig {
        disparities: d as usize,
        ..Default::default()
    })
}

/// Only the refinement-stage tensors are needed, so the rest of the
/// checkpoint is skipped.
fn load_refinement_params(ckpt: &Path, cfg: &MatcherConfig) -> Result<ParamSet> {
    let records = read_checkpoint_file(ckpt)?;
    let mut params = ParamSet::zeros(cfg);
    for (name, t) in params.named_tensors_mut() {
        let Some(rec) = records.iter().find(|r| r.name == name) else {
            bail!("checkpoint {} has no tensor {name:?}", ckpt.display());
        };
        if rec.dims != t.dims() {
            bail!("tensor {name:?} has dims {:?}, expected {:?}", rec.dims, t.dims());
        }
        t.value.copy_from_slice(&rec.values);
    }
    Ok(params)
}

fn run_refine(
    disp: &Path,
    left: &Path,
    matchability: &Path,
    ckpt: &Path,
    iters: usize,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (mut cfg, params) = match config {
        Some(path) => {
            let cfg = read_train_config(path)?.matcher;
            let params = load_params(Some(ckpt), &cfg)?;
            (cfg, params)
        }
        None => {
            let cfg = config_from_checkpoint(ckpt)?;
            let params = load_refinement_params(ckpt, &cfg)?;
            (cfg, params)
        }
    };
    cfg.refine_iters = iters;
    let d = read_pfm(disp)
        .with_context(|| format!("reading {}", disp.display()))?
        .with_role(MapRole::Disparity);
    let m = read_pfm(matchability)
        .with_context(|| format!("reading {}", matchability.display()))?
        .with_role(MapRole::Matchability);
    let l = read_image(left).with_context(|| format!("reading {}", left.display()))?;
    let refined = refine_disparity(&d, &l, &m, &cfg, &params)?;
    write_pfm(out, &refined)?;
    Ok(())
}

fn run_gradcheck(op: &str, instances: usize, seed: u64) -> Result<bool> {
    let reports = run_suite(Some(op), instances, seed)?;
    println!("{:<18} {:>9} {:>12} {:>10}", "op", "instances", "max error", "tolerance");
    let mut ok = true;
    for r in &reports {
        println!(
            "{:<18} {:>9} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.instances,
            r.max_error,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
        ok &= r.passed();
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Match {
            left,
            right,
            config,
            ckpt,
            out_disp,
            out_match,
            heatmaps,
        } => run_match(
            &left,
            &right,
            &config,
            ckpt.as_deref(),
            &out_disp,
            out_match.as_deref(),
            heatmaps.as_deref(),
        )?,
        Command::Eval {
            pred,
            gt,
            logscale,
            max_disp,
            csv,
        } => run_eval(&pred, &gt, logscale.as_deref(), max_disp, csv)?,
        Command::TrainToy {
            config,
            seed,
            out,
            history,
        } => run_train(&config, seed, &out, &history)?,
        Command::Refine {
            disp,
            left,
            matchability,
            ckpt,
            iters,
            config,
            out,
        } => run_refine(&disp, &left, &matchability, &ckpt, iters, config.as_deref(), &out)?,
        Command::Gradcheck { op, instances, seed } => return run_gradcheck(&op, instances, seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
