//! Command-line front end: INI-configured experiments that write their
//! artifacts and a manifest into one output directory.

// `!(x < y)` is used on purpose so that NaN takes the failing branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]


pub mod commands;
pub mod config;
pub mod dump;
pub mod error;
pub mod manifest;

use std::path::{Path, PathBuf};
use std::time::Instant;

pub use commands::Outcome;
pub use config::ExperimentConfig;
pub use error::CliError;
pub use manifest::{RunManifest, MANIFEST_FILE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Fit,
    Train,
    Spectrum,
    Crossres,
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Train => "train",
            Command::Spectrum => "spectrum",
            Command::Crossres => "crossres",
            Command::Gradcheck => "gradcheck",
        }
    }

    pub fn schema(self) -> Vec<config::KeySpec> {
        match self {
            Command::Fit => commands::fit::schema(),
            Command::Train => commands::train::schema(),
            Command::Spectrum => commands::spectrum::schema(),
            Command::Crossres => commands::crossres::schema(),
            Command::Gradcheck => commands::gradcheck::schema(),
        }
    }

    fn execute(self, cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
        match self {
            Command::Fit => commands::fit::run(cfg, out),
            Command::Train => commands::train::run(cfg, out),
            Command::Spectrum => commands::spectrum::run(cfg, out),
            Command::Crossres => commands::crossres::run(cfg, out),
            Command::Gradcheck => commands::gradcheck::run(cfg, out),
        }
    }
}

/// Result of [`run`]: where the artifacts went and how the command ended.
#[derive(Debug)]
pub struct Finished {
    /// `None` when the configuration could not be read, in which case no
    /// manifest was written.
    pub output_dir: Option<PathBuf>,
    pub result: Result<Outcome, CliError>,
}

/// Parses `config_path` and runs `command`. Once the configuration is valid
/// a manifest is written whether or not the command succeeds.
pub fn run(command: Command, config_path: &Path) -> Finished {
    let cfg = match ExperimentConfig::load(config_path, &command.schema()) {
        Ok(c) => c,
        Err(e) => return Finished { output_dir: None, result: Err(e) },
    };
    let out = match cfg.get::<String>("run.output_dir") {
        Ok(d) => PathBuf::from(d),
        Err(e) => return Finished { output_dir: None, result: Err(e) },
    };
    if let Err(e) = std::fs::create_dir_all(&out) {
        return Finished {
            output_dir: None,
            result: Err(CliError::io(&out, e)),
        };
    }
    let start = Instant::now();
    let mut result = command.execute(&cfg, &out);
    let manifest = RunManifest {
        command: command.name().to_owned(),
        version: env!("CARGO_PKG_VERSION").to_owned(),
        seed: cfg.opt("run.seed").ok().flatten(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        error: result.as_ref().err().map(|e| e.to_string()),
        config: cfg.snapshot(),
        files: Vec::new(),
    };
    if let Err(e) = manifest.write(&out) {
        // the command's own error is the more useful one to report
        if result.is_ok() {
            result = Err(e);
        }
    }
    Finished { output_dir: Some(out), result }
}
