use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use slabseg::geometry::{DEFAULT_MARGIN_MM, DEFAULT_TARGET_MM};
use slabseg::pipeline::{
    calibrate_case, calibrate_file, evaluate_dirs, segment_case, segment_path, synth_dataset, train_dataset,
    write_templates, ErrorJson, EvaluateOptions, PipelineError, ProjectManifest, Segmenter, TrainOptions,
};
use slabseg::synth::SynthConfig;
use slabseg::unet::{TrainConfig, UNetConfig};

#[derive(Debug, Parser)]
#[command(
    name = "slabseg",
    version,
    about = "Calibrate, segment and evaluate coronal brain-slab photographs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rectify a raw photo from a ruler or fiducial calibration JSON.
    Calibrate {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        /// Rectified PNG; the sidecar is written next to it as JSON.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TARGET_MM)]
        target_mm: f64,
        #[arg(long, default_value_t = DEFAULT_MARGIN_MM)]
        margin_mm: f64,
    },
    /// Write the standard corner fiducial templates for a rectangle.
    Templates {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, num_args = 2, value_names = ["W", "H"])]
        rect_mm: Vec<f64>,
        #[arg(long, default_value_t = 8)]
        cell_px: usize,
    },
    /// Segment one rectified image or a directory of them.
    Segment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model container; repeat to ensemble.
        #[arg(long = "model", required_unless_present = "baseline")]
        models: Vec<PathBuf>,
        /// Use the classical Otsu baseline instead of a model.
        #[arg(long, conflicts_with = "models")]
        baseline: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score predicted masks against references paired by file stem.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        band_mm: f64,
        #[arg(long, default_value_t = 2.0)]
        threshold_mm: f64,
    },
    /// Generate a procedural training dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        /// Full generator config as TOML; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a U-Net on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Full training options as TOML; the desk-scale preset otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        val_count: Option<usize>,
        /// Train in 64-bit floating point.
        #[arg(long)]
        f64: bool,
    },
    /// Manage a QC project directory.
    Project {
        #[command(subcommand)]
        command: ProjectCommand,
    },
    /// Serve the QC HTTP API for a project.
    Serve {
        #[arg(long)]
        project: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Debug, Subcommand)]
enum ProjectCommand {
    /// Create an empty project.
    Init {
        #[arg(long)]
        dir: PathBuf,
        /// Model container path relative to the project; repeat to ensemble.
        #[arg(long = "model")]
        models: Vec<String>,
    },
    /// Register a raw photo, optionally with a reference mask.
    Add {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
    },
    /// Calibrate a case from a calibration JSON file.
    Calibrate {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long)]
        calibration: PathBuf,
    },
    /// Segment a calibrated case with the project models.
    Segment {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        id: String,
    },
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::File {
        path: path.display().to_string(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| PipelineError::InvalidInput(format!("{}: {e}", path.display())))
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn not_found(id: &str) -> PipelineError {
    PipelineError::NotFound(format!("case {id}"))
}

fn run_project(cmd: ProjectCommand) -> Result<(), PipelineError> {
    match cmd {
        ProjectCommand::Init { dir, models } => print_json(&ProjectManifest::init(&dir, &models)?),
        ProjectCommand::Add {
            dir,
            id,
            image,
            reference,
        } => {
            let mut m = ProjectManifest::load(&dir)?;
            let record = m.add_case(&dir, &id, &image, reference.as_deref())?.clone();
            m.save(&dir)?;
            print_json(&record);
        }
        ProjectCommand::Calibrate { dir, id, calibration } => {
            let mut m = ProjectManifest::load(&dir)?;
            let spec = slabseg::pipeline::read_calibration(&calibration)?;
            let case = m.case(&id).ok_or_else(|| not_found(&id))?.clone();
            let (sidecar, rel) = calibrate_case(&dir, &m.settings, &case, &spec)?;
            let case = m.case_mut(&id).expect("case exists");
            case.set_calibration(sidecar, rel);
            let record = case.clone();
            m.save(&dir)?;
            print_json(&record);
        }
        ProjectCommand::Segment { dir, id } => {
            let mut m = ProjectManifest::load(&dir)?;
            let seg = m
                .segmenter(&dir)?
                .ok_or_else(|| PipelineError::Conflict("the project has no model configured".into()))?;
            let case = m.case(&id).ok_or_else(|| not_found(&id))?.clone();
            let (rel, eval) = segment_case(&dir, &m.settings, &case, &seg)?;
            let case = m.case_mut(&id).expect("case exists");
            case.set_prediction(rel, eval)?;
            let record = case.clone();
            m.save(&dir)?;
            print_json(&record);
        }
    }
    Ok(())
}

/// Exit code 1 signals that a batch finished with some items failed.
fn run(cli: Cli) -> Result<u8, PipelineError> {
    match cli.command {
        Command::Calibrate {
            image,
            calibration,
            out,
            target_mm,
            margin_mm,
        } => print_json(&calibrate_file(&image, &calibration, &out, target_mm, margin_mm)?),
        Command::Templates { out, rect_mm, cell_px } => {
            print_json(&write_templates(&out, [rect_mm[0], rect_mm[1]], cell_px)?)
        }
        Command::Segment {
            input,
            out,
            models,
            baseline,
            jobs,
        } => {
            let seg = if baseline {
                Segmenter::Baseline
            } else {
                Segmenter::load(&models)?
            };
            let outcome = segment_path(&seg, &input, &out, jobs)?;
            print_json(&outcome);
            if !outcome.failures.is_empty() {
                return Ok(1);
            }
        }
        Command::Evaluate {
            pred,
            reference,
            out,
            band_mm,
            threshold_mm,
        } => {
            let outcome = evaluate_dirs(&pred, &reference, &out, EvaluateOptions { band_mm, threshold_mm })?;
            print_json(&outcome.summary);
        }
        Command::Synth { out, n, config, seed } => {
            let mut cfg: SynthConfig = match config {
                Some(p) => read_toml(&p)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let manifest = synth_dataset(&cfg, n, &out)?;
            print_json(&json!({"images": manifest.entries.len(), "out": out}));
        }
        Command::Train {
            data,
            out,
            config,
            epochs,
            seed,
            folds,
            val_count,
            f64,
        } => {
            let mut opts: TrainOptions = match config {
                Some(p) => read_toml(&p)?,
                None => TrainOptions {
                    train: TrainConfig::desk(),
                    unet: UNetConfig::desk(),
                    val_count: 20,
                    f64: false,
                },
            };
            if let Some(e) = epochs {
                opts.train.epochs = e;
            }
            if let Some(s) = seed {
                opts.train.seed = s;
            }
            if let Some(f) = folds {
                opts.train.folds = f;
            }
            if let Some(v) = val_count {
                opts.val_count = v;
            }
            opts.f64 |= f64;
            print_json(&train_dataset(&data, &out, &opts)?);
        }
        Command::Project { command } => run_project(command)?,
        Command::Serve { project, addr } => {
            let rt = tokio::runtime::Runtime::new().map_err(|e| PipelineError::InvalidInput(e.to_string()))?;
            rt.block_on(slabseg::pipeline::service::serve(&project, addr))?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = ErrorJson {
                kind: "UsageError".into(),
                detail: e.to_string().trim_end().to_string(),
            };
            eprintln!("{}", serde_json::to_string(&err).expect("error serializes"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e.to_json()).expect("error serializes"));
            ExitCode::from(2)
        }
    }
}
