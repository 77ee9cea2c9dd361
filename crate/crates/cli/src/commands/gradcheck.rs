//! `gradcheck`: reverse-mode gradients of random FlexConv layers against
//! central differences.

use std::path::Path;

use flexkernel::training::GradcheckCase;

use super::{config_check, run_keys, write_file, Outcome};
use crate::config::{key, ExperimentConfig, KeySpec, Need};
use crate::error::CliError;

pub const GRADCHECK_FILE: &str = "gradcheck.csv";
pub const CSV_HEADER: &str = "seed,attempts,dims,layers,hidden,k,params,penalty_active,max_relative_error,worst_param";

pub fn schema() -> Vec<KeySpec> {
    let mut s = run_keys();
    s.extend([
        key("gradcheck.seeds", Need::Default("1,2,3")),
        key("gradcheck.h", Need::Default("1e-4")),
        key("gradcheck.tolerance", Need::Default("1e-4")),
    ]);
    s
}

pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    let seeds: Vec<u64> = cfg.list("gradcheck.seeds")?;
    let h: f64 = cfg.get("gradcheck.h")?;
    let tolerance: f64 = cfg.get("gradcheck.tolerance")?;
    if seeds.is_empty() || !(h > 0.0) || !(tolerance > 0.0) {
        return Err(CliError::Config("gradcheck needs seeds and positive h and tolerance".into()));
    }
    let mut csv = format!("{CSV_HEADER}\n");
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for seed in &seeds {
        let case = config_check(GradcheckCase::random(*seed))?;
        let r = case.check(h)?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.seed, case.attempts, r.dims, r.layers, r.hidden, r.k, r.params, r.penalty_active, r.max_relative_error, r.worst_param
        ));
        worst = worst.max(r.max_relative_error);
        // NaN must count as a failure
        if !(r.max_relative_error < tolerance) {
            failed.push(format!("seed {} ({}: {:e})", r.seed, r.worst_param, r.max_relative_error));
        }
    }
    write_file(out, GRADCHECK_FILE, csv)?;
    if !failed.is_empty() {
        return Err(CliError::Gradcheck(format!("relative error above {tolerance:e} for {}", failed.join(", "))));
    }
    Ok(Outcome::new().with("cases", seeds.len()).with("max_relative_error", worst))
}
