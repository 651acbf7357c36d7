//! Command-line front end: one binary, one subcommand per stage of the
//! workflow — synthesize a dataset, pre-train, probe, fine-tune, segment,
//! cluster, and summarize metric curves. Reports are JSON, curves are CSV,
//! and every artifact-producing run writes a resolved-config snapshot with
//! the tool version next to its outputs. Failures print one machine-
//! readable error record to stderr and exit 1; usage errors exit 2.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use dicom_core::trainer::{self, TrainState};
use dicom_core::{analysis, classify, metrics, segment};
use dicom_core::{Dataset, Error, Result, RunConfig, Split};

#[derive(Parser)]
#[command(
    name = "dicom",
    version,
    about = "Self-distilling masked pre-training for grayscale images, with downstream probes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a labeled synthetic grayscale dataset (images, masks, manifest).
    GenSynth {
        /// Number of classes.
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Images per class.
        #[arg(long = "per-class", default_value_t = 50)]
        per_class: usize,
        /// Image size as HxW, e.g. 64x64.
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the student/teacher pair on unlabeled images.
    Pretrain {
        /// JSON config; omitted fields take defaults. Required unless resuming.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest CSV.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the loss curve.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint directory; its embedded config is
        /// the authority (a --config given alongside must match it).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config's seed (fresh runs only).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a linear head on frozen class-token embeddings.
    Probe(EvalArgs),
    /// Re-train the whole encoder plus a linear head.
    Finetune(EvalArgs),
    /// Train the dense decoder for pixel labeling.
    Segment(EvalArgs),
    /// Split embeddings into two clusters and score label agreement.
    ClusterEval(EvalArgs),
    /// Area under the running-maximum curve of a bounded metric.
    Soc {
        /// CSV curve file (e.g. the .curve.csv written by probe/finetune).
        #[arg(long)]
        curve: PathBuf,
        /// Column to summarize (case-insensitive), e.g. AUPR.
        #[arg(long)]
        column: String,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory from pretrain.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset manifest CSV.
    #[arg(long)]
    data: PathBuf,
    /// Report path (JSON); siblings carry the curve CSV and config snapshot.
    #[arg(long)]
    out: PathBuf,
    /// Optional config overriding the checkpoint's evaluation settings; its
    /// architecture fields must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "code": e.code(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

// ── Shared plumbing ──────────────────────────────────────────────────────

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let parse = |t: &str| {
        t.parse::<usize>()
            .map_err(|_| Error::Config(vec![format!("size must be HxW with integer parts, got {s}")]))
    };
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(vec![format!("size must be HxW, got {s}")]))?;
    Ok((parse(h)?, parse(w)?))
}

/// Resolved config plus tool version, written next to every artifact.
fn write_snapshot(path: &Path, cfg: &RunConfig) -> Result<()> {
    let config: serde_json::Value =
        serde_json::from_str(&cfg.to_json()).expect("config serializes to JSON");
    let snap = serde_json::json!({ "version": env!("CARGO_PKG_VERSION"), "config": config });
    write_text(path, &serde_json::to_string_pretty(&snap).expect("snapshot is JSON"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `R.json` → `R.config.json` (and likewise for other suffixes).
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    out.with_extension(suffix)
}

fn load_for_eval(args: &EvalArgs) -> Result<(TrainState<f32>, RunConfig, Dataset)> {
    let override_cfg = match &args.config {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    };
    let state = TrainState::load(&args.ckpt, override_cfg.as_ref())?;
    let mut cfg = override_cfg.unwrap_or_else(|| state.cfg.clone());
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let size = (cfg.data.image_size[0], cfg.data.image_size[1]);
    let dataset = Dataset::open(&args.data, size)?;
    Ok((state, cfg, dataset))
}

// ── Subcommands ──────────────────────────────────────────────────────────

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenSynth { classes, per_class, size, seed, out } => {
            let size = parse_size(&size)?;
            let manifest = dicom_core::data::generate_synthetic(&out, classes, per_class, size, seed)?;
            let args = serde_json::json!({
                "version": env!("CARGO_PKG_VERSION"),
                "args": { "classes": classes, "per_class": per_class,
                          "size": [size.0, size.1], "seed": seed },
            });
            write_text(&out.join("generator.json"), &serde_json::to_string_pretty(&args).expect("JSON"))?;
            println!("{}", manifest.display());
            Ok(())
        }

        Cmd::Pretrain { config, data, out, resume, seed } => {
            let state = match resume {
                None => {
                    let path = config.ok_or_else(|| {
                        Error::Config(vec!["--config is required when not resuming".into()])
                    })?;
                    let mut cfg = RunConfig::load(&path)?;
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    let size = (cfg.data.image_size[0], cfg.data.image_size[1]);
                    let dataset = Arc::new(Dataset::open(&data, size)?);
                    write_snapshot(&out.join("run.json"), &cfg)?;
                    trainer::pretrain(&dataset, &cfg, &out)?
                }
                Some(ckpt) => {
                    if seed.is_some() {
                        return Err(Error::Config(vec![
                            "--seed cannot change a resumed run; the checkpoint's seed applies".into(),
                        ]));
                    }
                    let saved = TrainState::load(&ckpt, None)?;
                    if let Some(path) = config {
                        let given = RunConfig::load(&path)?;
                        if given.fingerprint() != saved.cfg.fingerprint() {
                            return Err(Error::Config(vec![format!(
                                "--config disagrees with the checkpoint's configuration \
                                 (fingerprint {} vs {})",
                                given.fingerprint(),
                                saved.cfg.fingerprint()
                            )]));
                        }
                    }
                    let size = (saved.cfg.data.image_size[0], saved.cfg.data.image_size[1]);
                    let dataset = Arc::new(Dataset::open(&data, size)?);
                    write_snapshot(&out.join("run.json"), &saved.cfg)?;
                    trainer::resume_pretrain(&dataset, &ckpt, &out)?
                }
            };
            let _ = state;
            println!("{}", trainer::final_checkpoint_dir(&out).display());
            Ok(())
        }

        Cmd::Probe(args) => {
            let (state, cfg, dataset) = load_for_eval(&args)?;
            let (_, report) = classify::linear_probe(&state.student.backbone, &dataset, &cfg)?;
            classify::write_report(&report, &args.out)?;
            write_snapshot(&sibling(&args.out, "config.json"), &cfg)?;
            println!("{}", args.out.display());
            Ok(())
        }

        Cmd::Finetune(args) => {
            let (state, cfg, dataset) = load_for_eval(&args)?;
            let (_, _, report) = classify::fine_tune(&state.student.backbone, &dataset, &cfg)?;
            classify::write_report(&report, &args.out)?;
            write_snapshot(&sibling(&args.out, "config.json"), &cfg)?;
            println!("{}", args.out.display());
            Ok(())
        }

        Cmd::Segment(args) => {
            let (state, cfg, dataset) = load_for_eval(&args)?;
            let (_, _, report) = segment::train_segmenter(&state.student.backbone, &dataset, &cfg)?;
            segment::write_seg_report(&report, &args.out)?;
            let mut curve = String::from("epoch,train_loss,mean_dice\n");
            for e in &report.per_epoch {
                let dice = e.mean_dice.map(|d| d.to_string()).unwrap_or_default();
                curve.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, dice));
            }
            write_text(&sibling(&args.out, "curve.csv"), &curve)?;
            write_snapshot(&sibling(&args.out, "config.json"), &cfg)?;
            println!("{}", args.out.display());
            Ok(())
        }

        Cmd::ClusterEval(args) => {
            let (state, cfg, dataset) = load_for_eval(&args)?;
            let (set, report) =
                analysis::cluster_split(&state.student.backbone, &dataset, &cfg, Split::Test)?;
            analysis::write_cluster_report(&report, &args.out)?;
            analysis::write_embedding_csv(&set, &sibling(&args.out, "embeddings.csv"))?;
            write_snapshot(&sibling(&args.out, "config.json"), &cfg)?;
            println!("{}", args.out.display());
            Ok(())
        }

        Cmd::Soc { curve, column } => {
            let values = read_curve_column(&curve, &column)?;
            let score = metrics::soc(&values)?;
            let report = serde_json::json!({
                "curve": curve.display().to_string(),
                "column": column,
                "epochs": values.len(),
                "soc": score,
            });
            println!("{}", serde_json::to_string_pretty(&report).expect("JSON"));
            Ok(())
        }
    }
}

/// Pull one numeric column out of a curve CSV, in row order.
fn read_curve_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Data(format!("cannot read {}: {e}", path.display())),
        _ => Error::Data(format!("{}: {e}", path.display())),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let col = headers
        .iter()
        .position(|h| h.eq_ignore_ascii_case(column))
        .ok_or_else(|| {
            Error::Data(format!(
                "{} has no column '{column}' (found: {})",
                path.display(),
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })?;
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let cell = record.get(col).unwrap_or("");
        if cell.is_empty() {
            return Err(Error::Metric(format!(
                "column '{column}' is empty at data row {} of {}",
                i + 1,
                path.display()
            )));
        }
        let v: f64 = cell.parse().map_err(|_| {
            Error::Data(format!("'{cell}' in column '{column}' of {} is not a number", path.display()))
        })?;
        values.push(v);
    }
    Ok(values)
}
