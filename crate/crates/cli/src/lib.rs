//! Command implementations behind the `ctseg` binary.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 I/O or data
//! error, 4 numerical divergence during training.

pub mod config;
pub mod overlay;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ctseg::phantom::{generate_dataset, Manifest, MANIFEST_NAME};
use ctseg::pipeline::{
    load_manifest_cases, norm_sidecar_text, parse_norm_sidecar, prepare_training_data, segment, split_cases, train,
    evaluate, DataAudit, IterationRecord, OracleStub, Phase, RawCase, TrainObserver, ValidationEvent, WindowPredictor,
};
use ctseg::preprocess::{normalize, resample_nearest, NormStats};
use ctseg::unet::{load_checkpoint, save_checkpoint, CheckpointMeta, Model};
use ctseg::volgrid::{read_svol_file, write_svol_labels, Spacing};
use thiserror::Error;

use config::RunConfig;
use report::CaseRow;

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const NORM_FILE: &str = "norm_stats.txt";
pub const SPLIT_FILE: &str = "split.txt";
pub const RUN_CONFIG_FILE: &str = "run.ini";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] ctseg::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) | CliError::Data(_) => 3,
            CliError::Core(e) => match e {
                ctseg::Error::Usage(_) => 2,
                ctseg::Error::Divergence { .. } => 4,
                _ => 3,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ctseg", version, about = "Multi-class CT segmentation with a 3D encoder-decoder network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// INI run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra override, repeatable: `--set train.lr=1e-6`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Train on a phantom dataset and keep the best validation checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory holding a manifest.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Suppress progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Segment one CT volume; `--out` names the output mask file.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ct: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Whitening stats sidecar written by `train`.
        #[arg(long)]
        norm: Option<PathBuf>,
        /// Predict this label volume instead of running a model.
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Directory for per-slice PNG overlays.
        #[arg(long)]
        overlays: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        overlay_every: usize,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        norm: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Render metric tables or training curves from CSV files.
    Report {
        #[command(flatten)]
        common: Common,
        /// Per-case metrics CSV.
        #[arg(long, conflicts_with = "history")]
        from_csv: Option<PathBuf>,
        /// Training history CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Writes through a temporary file so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    write_file(&tmp, bytes)?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.set_dotted(o)?;
    }
    if let Some(f) = common.fold {
        cfg.fold = f;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = Some(o.clone());
    }
    Ok(cfg)
}

fn require_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.out_dir
        .clone()
        .ok_or_else(|| CliError::Config("an output location is required (--out or [paths] out)".into()))
}

fn require_data(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.data_dir
        .clone()
        .ok_or_else(|| CliError::Config("a dataset directory is required (--data or [paths] data)".into()))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Phantom { common, cases } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.phantom.seed = s;
            }
            if let Some(n) = cases {
                cfg.cases = n;
            }
            cmd_phantom(&cfg)
        }
        Command::Train {
            common,
            data,
            epochs,
            quiet,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
                cfg.split_seed = s;
            }
            if let Some(d) = data {
                cfg.data_dir = Some(d);
            }
            if let Some(e) = epochs {
                cfg.train.total_epochs = e;
            }
            cmd_train(&cfg, quiet)
        }
        Command::Infer {
            common,
            ct,
            checkpoint,
            norm,
            oracle,
            overlays,
            overlay_every,
        } => {
            let cfg = load_config(&common)?;
            let out = require_out(&cfg)?;
            cmd_infer(&cfg, &InferArgs {
                ct,
                checkpoint,
                norm,
                oracle,
                overlays,
                overlay_every,
                out,
            })
        }
        Command::Evaluate {
            common,
            checkpoint,
            norm,
            data,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.split_seed = s;
            }
            if let Some(d) = data {
                cfg.data_dir = Some(d);
            }
            cmd_evaluate(&cfg, &checkpoint, &norm)
        }
        Command::Report {
            common,
            from_csv,
            history,
        } => {
            let cfg = load_config(&common)?;
            match (from_csv, history) {
                (Some(m), None) => cmd_report_metrics(&m, cfg.out_dir.as_deref()),
                (None, Some(h)) => cmd_report_history(&h, &require_out(&cfg)?),
                _ => Err(CliError::Config("report needs exactly one of --from-csv or --history".into())),
            }
        }
    }
}

pub fn cmd_phantom(cfg: &RunConfig) -> Result<(), CliError> {
    let out = require_out(cfg)?;
    let pcfg = cfg.phantom_config()?;
    let manifest = generate_dataset(&pcfg, cfg.cases, &out)?;
    println!(
        "wrote {} cases, manifest {}",
        manifest.entries.len(),
        out.join(MANIFEST_NAME).display()
    );
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<(PathBuf, Vec<RawCase>), CliError> {
    let data = require_data(cfg)?;
    let manifest = Manifest::load(&data)?;
    let cases = load_manifest_cases(&data, &manifest)?;
    Ok((data, cases))
}

struct Progress<'a> {
    quiet: bool,
    out: &'a Path,
    start: Instant,
    recent: Vec<f64>,
}

impl TrainObserver for Progress<'_> {
    fn on_iteration(&mut self, r: &IterationRecord) {
        self.recent.push(r.loss);
        if !self.quiet && r.iteration % 100 == 0 {
            let mean = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
            eprintln!(
                "iteration {} epoch {} mean loss {mean:.1} ({:.0}s)",
                r.iteration,
                r.epoch,
                self.start.elapsed().as_secs_f64()
            );
            self.recent.clear();
        }
    }

    fn on_validation(&mut self, e: &ValidationEvent) {
        if !self.quiet {
            eprintln!(
                "  validation on {:?}: dice bone {:.4} nerve {:.4}",
                e.case_ids, e.dice[0], e.dice[1]
            );
        }
    }

    fn on_checkpoint(&mut self, model: &Model, meta: &CheckpointMeta) -> ctseg::Result<()> {
        let path = self.out.join(CHECKPOINT_FILE);
        write_atomic(&path, &save_checkpoint(model, meta)).map_err(|e| {
            ctseg::Error::Io {
                path: path.clone(),
                source: std::io::Error::other(e.to_string()),
            }
        })?;
        if !self.quiet {
            eprintln!("  checkpoint: mean dice {:.4}", meta.best_dice);
        }
        Ok(())
    }
}

pub fn cmd_train(cfg: &RunConfig, quiet: bool) -> Result<(), CliError> {
    let out = require_out(cfg)?;
    cfg.validate()?;
    let tcfg = cfg.train_config()?;
    let (_, cases) = load_dataset(cfg)?;
    let ids: Vec<usize> = cases.iter().map(|c| c.id).collect();
    let split = split_cases(&ids, cfg.split_seed, cfg.fold, &cfg.split)?;
    create_dir(&out)?;
    write_file(&out.join(RUN_CONFIG_FILE), cfg.dump().as_bytes())?;

    let fmt_ids = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
    let mut audit_text = format!(
        "fold {} of {} (split seed {})\ntrain ({}): {}\nvalidation ({}): {}\ntest ({}): {}\ndisjoint: {}\n",
        cfg.fold,
        cfg.split.folds,
        cfg.split_seed,
        split.train.len(),
        fmt_ids(&split.train),
        split.validation.len(),
        fmt_ids(&split.validation),
        split.test.len(),
        fmt_ids(&split.test),
        split.is_disjoint()
    );
    println!("{audit_text}");

    let data = prepare_training_data(&cases, &split)?;
    write_file(&out.join(NORM_FILE), norm_sidecar_text(&data.norm).as_bytes())?;
    let mut progress = Progress {
        quiet,
        out: &out,
        start: Instant::now(),
        recent: Vec::new(),
    };
    let outcome = train(&data, &tcfg, &mut progress)?;
    write_file(&out.join(HISTORY_FILE), outcome.history.to_csv().as_bytes())?;
    audit_text.push_str(&format!(
        "accesses: train {} validation {} test {}; within split: {}\n",
        outcome.audit.records.iter().filter(|r| r.0 == Phase::Train).count(),
        outcome.audit.records.iter().filter(|r| r.0 == Phase::Validation).count(),
        outcome.audit.records.iter().filter(|r| r.0 == Phase::Test).count(),
        outcome.audit.respects(&split)
    ));
    write_file(&out.join(SPLIT_FILE), audit_text.as_bytes())?;
    match outcome.best {
        Some(best) => println!(
            "best mean validation dice {:.4} at iteration {}; checkpoint {}",
            best.best_dice,
            best.iteration,
            out.join(CHECKPOINT_FILE).display()
        ),
        None => println!("no validation event ran; no checkpoint written"),
    }
    Ok(())
}

pub struct InferArgs {
    pub ct: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub norm: Option<PathBuf>,
    pub oracle: Option<PathBuf>,
    pub overlays: Option<PathBuf>,
    pub overlay_every: usize,
    pub out: PathBuf,
}

pub fn cmd_infer(cfg: &RunConfig, args: &InferArgs) -> Result<(), CliError> {
    let spec = cfg.train_config()?.patch_spec()?;
    let raw = read_svol_file(&args.ct)?.into_volume()?;
    let ct = resample_nearest(&raw, Spacing::ISOTROPIC_1MM)?;
    let norm = match &args.norm {
        Some(p) => parse_norm_sidecar(&read_text(p)?)?,
        None if args.oracle.is_some() => NormStats { mean: 0.0, std: 1.0 },
        None => return Err(CliError::Config("--norm is required when running a model".into())),
    };
    let input = normalize(&ct, &norm);
    let predictor: Box<dyn WindowPredictor> = match (&args.oracle, &args.checkpoint) {
        (Some(label), _) => {
            let label = read_svol_file(label)?.into_labels()?;
            Box::new(OracleStub {
                label: resample_nearest(&label, Spacing::ISOTROPIC_1MM)?,
            })
        }
        (None, Some(ckpt)) => {
            let bytes = std::fs::read(ckpt).map_err(|e| io_err(ckpt, e))?;
            Box::new(load_checkpoint(&bytes)?.0)
        }
        (None, None) => return Err(CliError::Config("infer needs --checkpoint or --oracle".into())),
    };
    let start = Instant::now();
    let mask = segment(predictor.as_ref(), &input, &spec)?;
    let seconds = start.elapsed().as_secs_f64();
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&args.out, &write_svol_labels(&mask))?;
    if let Some(dir) = &args.overlays {
        overlay::write_overlays(&ct, &mask, dir, args.overlay_every)?;
    }
    println!("wrote {} shape {:?}", args.out.display(), mask.shape());
    eprintln!("inference took {seconds:.2}s");
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, norm: &Path) -> Result<(), CliError> {
    let spec = cfg.train_config()?.patch_spec()?;
    let bytes = std::fs::read(checkpoint).map_err(|e| io_err(checkpoint, e))?;
    let (model, _) = load_checkpoint(&bytes)?;
    let stats = parse_norm_sidecar(&read_text(norm)?)?;
    let (_, cases) = load_dataset(cfg)?;
    let ids: Vec<usize> = cases.iter().map(|c| c.id).collect();
    let split = split_cases(&ids, cfg.split_seed, cfg.fold, &cfg.split)?;
    let test: Vec<&RawCase> = split
        .test
        .iter()
        .map(|id| cases.iter().find(|c| c.id == *id).expect("split ids come from the dataset"))
        .collect();
    if let Some(c) = test.iter().find(|c| c.label.is_none()) {
        return Err(CliError::Data(format!("test case {} has no label", c.id)));
    }
    let mut audit = DataAudit::default();
    let report = evaluate(&model, &test, &stats, &spec, &mut audit)?;
    let rows: Vec<CaseRow> = report
        .cases
        .iter()
        .map(|c| CaseRow {
            case: c.id.to_string(),
            metrics: c.metrics,
        })
        .collect();
    let tables = report::metric_tables(&rows)?;
    print!("{tables}");
    for c in &report.cases {
        eprintln!("case {}: {:.2}s", c.id, c.seconds);
    }
    if let Some(out) = &cfg.out_dir {
        create_dir(out)?;
        write_file(&out.join("metrics.csv"), report::metrics_to_csv(&rows).as_bytes())?;
        write_file(&out.join("metrics.txt"), tables.as_bytes())?;
    }
    Ok(())
}

pub fn cmd_report_metrics(csv: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let rows = report::metrics_from_csv(&read_text(csv)?)?;
    let tables = report::metric_tables(&rows)?;
    print!("{tables}");
    if let Some(out) = out {
        create_dir(out)?;
        write_file(&out.join("metrics.txt"), tables.as_bytes())?;
    }
    Ok(())
}

pub fn cmd_report_history(csv: &Path, out: &Path) -> Result<(), CliError> {
    let history = ctseg::pipeline::TrainHistory::from_csv(&read_text(csv)?).map_err(|e| CliError::Data(e.to_string()))?;
    create_dir(out)?;
    let loss = report::downsample_loss(&history, 500);
    write_file(&out.join("dice_curve.csv"), report::dice_curve_csv(&history).as_bytes())?;
    write_file(&out.join("loss_curve.csv"), report::loss_curve_csv(&loss).as_bytes())?;
    let steps = |f: &dyn Fn(&ValidationEvent) -> f64| -> Vec<(f64, f64)> {
        history.validations.iter().enumerate().map(|(i, v)| ((i + 1) as f64, f(v))).collect()
    };
    let envelope: Vec<(f64, f64)> = history
        .best_dice_envelope()
        .into_iter()
        .enumerate()
        .map(|(i, v)| ((i + 1) as f64, v))
        .collect();
    let dice_svg = report::svg_chart(
        "Validation Dice",
        "validation step",
        "Dice",
        &[
            ("bone", "#c0392b", steps(&|v| v.dice[0])),
            ("nerve", "#27ae60", steps(&|v| v.dice[1])),
            ("best mean", "#2c3e50", envelope),
        ],
    );
    let loss_svg = report::svg_chart(
        "Training loss",
        "iteration",
        "loss",
        &[("loss", "#2980b9", loss.iter().map(|&(i, l)| (i as f64, l)).collect())],
    );
    write_file(&out.join("dice_curve.svg"), dice_svg.as_bytes())?;
    write_file(&out.join("loss_curve.svg"), loss_svg.as_bytes())?;
    println!(
        "{} validation points, {} loss points written to {}",
        history.validations.len(),
        loss.len(),
        out.display()
    );
    Ok(())
}
