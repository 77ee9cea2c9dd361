use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use flexkernel_cli::{run, Command};

/// Continuous-kernel experiments driven by INI configuration files.
#[derive(Parser)]
#[command(name = "flexkernel", version)]
struct Args {
    command: Command,
    /// INI file describing the run.
    config: PathBuf,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let finished = run(args.command, &args.config);
    match finished.result {
        Ok(outcome) => {
            let mut line = format!("ok command={}", args.command.name());
            if let Some(dir) = &finished.output_dir {
                line.push_str(&format!(" output_dir={}", dir.display()));
            }
            for (k, v) in &outcome.summary {
                line.push_str(&format!(" {k}={v}"));
            }
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
