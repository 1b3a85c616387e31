use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use otseg::cluster::CenterBank;
use otseg::data::{self, SynthSpec};
use otseg::inspect::{self, Assignment};
use otseg::model::Model;
use otseg::sinkhorn::SolverSettings;
use otseg::trainer::{self, TrainConfig};
use otseg::{Error, Result};

#[derive(Parser)]
#[command(name = "otseg", version, about = "Clustering-based contrastive training for point cloud segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint, centers, memory bank and traces to --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Steps before the contrast terms switch on; overrides the config.
        #[arg(long)]
        warmup_steps: Option<usize>,
    },
    /// Evaluate a checkpoint; prints a JSON metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
    },
    /// Dump per-point subclass assignments and per-subclass occupancy.
    ClusterReport {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Center bank snapshot.
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Nearest)]
        assignment: Mode,
        #[arg(long, default_value_t = otseg::sinkhorn::DEFAULT_LAMBDA)]
        lambda: f64,
    },
    /// Project embeddings onto their top principal components.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional center bank; adds a nearest-subclass column.
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        dims: usize,
    },
    /// Generate a synthetic scene set from a TOML spec.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Nearest,
    Transport,
}

fn load_scenes(dir: &Path) -> Result<Vec<data::Scene>> {
    let scenes = data::read_scene_dir(dir)?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument(format!("no scene files in {}", dir.display())));
    }
    Ok(scenes)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            scenes,
            out,
            warmup_steps,
        } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            cfg.apply_env()?;
            if let Some(w) = warmup_steps {
                cfg.warmup_steps = w;
            }
            cfg.validate()?;
            let (run, files) = trainer::train(&cfg, &scenes, &out)?;
            let last = run.traces.last().expect("at least one step");
            println!(
                "{}",
                serde_json::json!({
                    "steps": run.steps(),
                    "final_total": last.total,
                    "checkpoint": files.checkpoint,
                    "trace": files.trace,
                })
            );
        }
        Command::Eval { checkpoint, scenes } => {
            let report = trainer::evaluate(&checkpoint, &scenes)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
        }
        Command::ClusterReport {
            checkpoint,
            bank,
            scenes,
            out,
            assignment,
            lambda,
        } => {
            let model = Model::load(&checkpoint)?;
            let (centers, _) = CenterBank::load(&bank)?;
            let scenes = load_scenes(&scenes)?;
            let settings = SolverSettings {
                lambda,
                ..SolverSettings::default()
            };
            let mode = match assignment {
                Mode::Nearest => Assignment::Nearest,
                Mode::Transport => Assignment::Transport,
            };
            let report = inspect::cluster_report(&model, &centers, &scenes, mode, settings)?;
            let occ = inspect::write_cluster_report(&report, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "rows": report.rows.len(),
                    "occupancy": report.occupancy,
                    "occupancy_csv": occ,
                })
            );
        }
        Command::ExportEmbeddings {
            checkpoint,
            scenes,
            out,
            bank,
            dims,
        } => {
            let model = Model::load(&checkpoint)?;
            let centers = bank.map(|p| CenterBank::load(&p)).transpose()?.map(|(c, _)| c);
            let scenes = load_scenes(&scenes)?;
            let export = inspect::export_embeddings(&model, &scenes, centers.as_ref(), dims)?;
            std::fs::write(&out, export.to_csv()).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            println!("{}", serde_json::json!({ "points": export.classes.len(), "variances": export.variances }));
        }
        Command::Synth { spec, out } => {
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                    SynthSpec::from_toml(&text)?
                }
                None => SynthSpec::default(),
            };
            let scenes = data::generate(&spec)?;
            let paths = data::write_scene_dir(&scenes, &out)?;
            println!("{}", serde_json::json!({ "scenes": paths.len(), "out": out }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
