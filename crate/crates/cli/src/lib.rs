//! The `lungseg` command-line driver. Every subcommand reads one
//! experiment configuration (file plus `--set key=value` overrides) and
//! communicates with the other stages only through files under the
//! configured output directory.

mod commands;
mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lungseg_core::{Error, ExperimentConfig, Result};

pub use commands::run;

/// Relative output directories are resolved against this directory.
pub const OUTPUT_ROOT_ENV: &str = "LUNGSEG_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(
    name = "lungseg",
    version,
    about = "Unsupervised lung CT segmentation with radiomics-distilled diffusion features"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Default, Args)]
pub struct ConfigArgs {
    /// Experiment configuration (.toml or .json). Defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Debug, Default, Args)]
pub struct HashArgs {
    /// Use a checkpoint even when its training hash differs from the request.
    #[arg(long)]
    pub allow_hash_mismatch: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the phantom benchmark suite (CT and ground-truth labels).
    Phantom(ConfigArgs),
    /// Train the denoiser and student head; writes the checkpoint and step metrics.
    Train(ConfigArgs),
    /// Segment volumes with a trained checkpoint.
    Segment {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        hash: HashArgs,
        /// Also dump the per-patch descriptors.
        #[arg(long)]
        dump_features: bool,
    },
    /// Sample synthetic volumes with the second-order solver.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        hash: HashArgs,
    },
    /// Score predictions against labels, and optionally generation fidelity.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        hash: HashArgs,
    },
    /// Run the six-row component ablation on the phantom benchmark.
    Ablate(ConfigArgs),
    /// Render the training loss curve and segmentation slice grids as PNG.
    Plot {
        #[command(flatten)]
        config: ConfigArgs,
        /// Axial slice index; the middle slice by default.
        #[arg(long)]
        slice: Option<usize>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Phantom(_) => "phantom",
            Command::Train(_) => "train",
            Command::Segment { .. } => "segment",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate(_) => "ablate",
            Command::Plot { .. } => "plot",
        }
    }

    pub fn config_args(&self) -> &ConfigArgs {
        match self {
            Command::Phantom(c) | Command::Train(c) | Command::Ablate(c) => c,
            Command::Segment { config, .. }
            | Command::Generate { config, .. }
            | Command::Evaluate { config, .. }
            | Command::Plot { config, .. } => config,
        }
    }
}

/// Loads the configuration, applies overrides and resolves the output
/// directory against `output_root` when it is relative.
pub fn resolve_config(args: &ConfigArgs, output_root: Option<PathBuf>) -> Result<ExperimentConfig> {
    let base = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(&args.overrides)?;
    if let Some(root) = output_root.filter(|_| cfg.output_dir.is_relative()) {
        cfg.output_dir = root.join(&cfg.output_dir);
    }
    Ok(cfg)
}

fn root_cause(e: &Error) -> &Error {
    match e {
        Error::Stage { source, .. } => root_cause(source),
        e => e,
    }
}

/// 1 for problems with the request or its inputs, 2 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    use std::io::ErrorKind;
    match root_cause(e) {
        Error::Unreadable { .. }
        | Error::MissingSpacing(_)
        | Error::HuOutOfRange { .. }
        | Error::InvalidArgument(_)
        | Error::ShapeMismatch(_)
        | Error::NonFinite(_)
        | Error::UndefinedHd95(_)
        | Error::HashMismatch { .. }
        | Error::Json(_) => 1,
        Error::Io(io) if matches!(io.kind(), ErrorKind::NotFound | ErrorKind::PermissionDenied) => {
            1
        }
        _ => 2,
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let name = cli.command.name();
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    let result = resolve_config(cli.command.config_args(), root)
        .map_err(|e| Error::Stage {
            stage: "config",
            source: Box::new(e),
        })
        .and_then(|cfg| run(&cli.command, &cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let e = match e {
                e @ Error::Stage { .. } => e,
                e => Error::Stage {
                    stage: name,
                    source: Box::new(e),
                },
            };
            eprintln!("lungseg {name}: error: {e}");
            exit_code(&e)
        }
    }
}
