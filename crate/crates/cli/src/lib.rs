//! Command-line pipeline: synthesize data, train, infer with ensembling,
//! evaluate and export overlay slices.

pub mod config;
pub mod evaluate;
pub mod infer;
pub mod io;
pub mod slices;
pub mod synth;
pub mod train;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use volseg::data::SynthSpec;
use volseg::{Error, Result};

use crate::io::{read_label_file, CaseSource, LabelFormat};
use crate::slices::Axis;

#[derive(Debug, Parser)]
#[command(name = "volseg", version, about = "Volumetric tumour segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Overrides the seed of `synth` and `train`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labelled dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        cases: usize,
        /// DxHxW, e.g. 48x48x48.
        #[arg(long, default_value = "48x48x48", value_parser = parse_size)]
        size: [usize; 3],
        #[arg(long, default_value_t = 0.5)]
        difficulty: f64,
    },
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `run_dir`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Predict label maps, averaging sigmoid outputs over checkpoints.
    Infer {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// A case directory or a dataset directory.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = LabelFormat::Native)]
        format: LabelFormat,
    },
    /// Compare predicted and reference label maps.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// CSV report, or JSON when the name ends in `.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a T1c slice with a label overlay as PPM.
    ExportSlices {
        #[arg(long)]
        case: PathBuf,
        /// Label map (`.json`, `.nii` or `.nii.gz`).
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn parse_size(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(format!("expected DxHxW, got `{s}`"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("bad extent `{p}` in `{s}`"))?;
    }
    Ok(out)
}

/// Process exit status for an error category.
pub fn exit_code(err: &Error) -> i32 {
    match err.category() {
        "argument" => 2,
        "config" => 3,
        "format" => 4,
        "io" => 5,
        "shape" => 6,
        "non_finite" => 7,
        "unsupported" => 8,
        "state" => 9,
        _ => 10,
    }
}

/// One-line machine-readable form of `err`.
pub fn error_line(err: &Error) -> String {
    serde_json::json!({ "error": { "category": err.category(), "message": err.to_string() } }).to_string()
}

pub fn configure_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Argument("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::State(format!("thread pool: {e}")))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.global.threads)?;
    let seed = cli.global.seed;
    match cli.command {
        Command::Synth { out, cases, size, difficulty } => {
            let spec = SynthSpec { extents: size, difficulty, ..SynthSpec::default() };
            synth::cmd_synth(&out, cases, &spec, seed.unwrap_or(0))?;
        }
        Command::Train { config, resume, run_dir } => {
            let mut cfg = config::TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(dir) = run_dir {
                cfg.run_dir = std::path::absolute(dir)?;
            }
            train::cmd_train(cfg, resume.as_deref())?;
        }
        Command::Infer { checkpoints, input, out, format } => {
            infer::cmd_infer(&checkpoints, &input, &out, format)?;
        }
        Command::Evaluate { pred, truth, out } => {
            evaluate::cmd_evaluate(&pred, &truth, &out)?;
        }
        Command::ExportSlices { case, pred, axis, index, out } => {
            let source = CaseSource::open(&case)?;
            let ids = source.ids();
            if ids.len() != 1 {
                return Err(Error::Argument(format!("{}: expected a single case, found {}", case.display(), ids.len())));
            }
            let c = source.load(&ids[0])?;
            slices::cmd_export_slices(&c, &read_label_file(&pred)?, axis, index, &out)?;
        }
    }
    Ok(())
}
