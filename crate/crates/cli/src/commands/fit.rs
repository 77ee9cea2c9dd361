//! `fit`: regress a kernel generator onto a target image.

use std::path::Path;

use flexkernel::kernelgen::checkpoint::{magnet_checkpoint, Checkpoint};
use flexkernel::kernelgen::InitConfig;
use flexkernel::numerics::params::named_tensors;
use flexkernel::training::{
    build_generator, fit_kernel, load_image_target, make_gabor_target, noise_target, FitConfig, GaborTarget, Generator, GeneratorKind,
};
use flexkernel::{Scalar, Tensor};

use super::{config_check, run_keys, spectrum_config, spectrum_keys, write_file, Outcome, Precision};
use crate::config::{key, ExperimentConfig, KeySpec, Need};
use crate::dump::dump_image;
use crate::error::CliError;

pub const TRAJECTORY_FILE: &str = "mse_trajectory.csv";

pub fn schema() -> Vec<KeySpec> {
    let mut s = run_keys();
    s.extend([
        key("run.precision", Need::Default("f64")),
        key("target.kind", Need::Default("gabor")),
        key("target.k", Need::Default("33")),
        key("target.freq", Need::Default("1")),
        key("target.orientation", Need::Default("0")),
        key("target.gamma", Need::Default("2")),
        key("target.phase", Need::Default("1.5707963267948966")),
        key("target.path", Need::Optional),
        key("generator.kind", Need::Default("magnet")),
        key("generator.layers", Need::Default("3")),
        key("generator.hidden", Need::Default("32")),
        key("generator.alpha", Need::Default("6")),
        key("generator.beta", Need::Default("1")),
        key("generator.omega_0", Need::Default("30")),
        key("generator.sine_weight_scale", Need::Optional),
        key("optim.steps", Need::Default("5000")),
        key("optim.lr", Need::Optional),
        key("optim.lambda", Need::Default("0")),
        key("optim.stop_below", Need::Optional),
    ]);
    s.extend(spectrum_keys());
    s
}

/// Step size used when `optim.lr` is left out.
pub fn default_lr(kind: GeneratorKind) -> f64 {
    match kind {
        GeneratorKind::Magnet | GeneratorKind::Mgn => 0.01,
        GeneratorKind::Siren => 0.001,
    }
}

enum TargetSpec {
    Gabor(GaborTarget, usize),
    Noise(usize),
    Image(String),
}

struct Settings {
    seed: u64,
    precision: Precision,
    target: TargetSpec,
    kind: GeneratorKind,
    layers: usize,
    hidden: usize,
    omega_0: f64,
    init: InitConfig,
    fit: FitConfig,
}

fn settings(cfg: &ExperimentConfig) -> Result<Settings, CliError> {
    let seed = cfg.get("run.seed")?;
    let k = cfg.get("target.k")?;
    let target = match cfg.get::<String>("target.kind")?.as_str() {
        "gabor" => TargetSpec::Gabor(
            GaborTarget {
                freq: cfg.get("target.freq")?,
                orientation: cfg.get("target.orientation")?,
                gamma: cfg.get("target.gamma")?,
                phase: cfg.get("target.phase")?,
            },
            k,
        ),
        "noise" => TargetSpec::Noise(k),
        "image" => TargetSpec::Image(
            cfg.opt("target.path")?
                .ok_or_else(|| CliError::Config("target.kind = image needs target.path".into()))?,
        ),
        other => return Err(CliError::Config(format!("unknown target.kind {other:?}"))),
    };
    let kind: GeneratorKind = cfg.get("generator.kind")?;
    let init = InitConfig {
        alpha: cfg.get("generator.alpha")?,
        beta: cfg.get("generator.beta")?,
        sine_weight_scale: cfg.opt("generator.sine_weight_scale")?,
        seed,
        ..InitConfig::default()
    };
    config_check(init.validate())?;
    let steps = cfg.get("optim.steps")?;
    let lr = cfg.opt("optim.lr")?.unwrap_or(default_lr(kind));
    let mut fit = FitConfig::new(steps, lr);
    fit.lambda = cfg.get("optim.lambda")?;
    fit.stop_below = cfg.opt("optim.stop_below")?;
    fit.spectrum = spectrum_config(cfg)?;
    fit.snapshot_steps = vec![0, steps / 2];
    config_check(fit.schedule.validate())?;
    if fit.lambda < 0.0 || !fit.lambda.is_finite() {
        return Err(CliError::Config("optim.lambda must be a non-negative number".into()));
    }
    Ok(Settings {
        seed,
        precision: cfg.get("run.precision")?,
        target,
        kind,
        layers: cfg.get("generator.layers")?,
        hidden: cfg.get("generator.hidden")?,
        omega_0: cfg.get("generator.omega_0")?,
        init,
        fit,
    })
}

pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    let s = settings(cfg)?;
    match s.precision {
        Precision::F32 => execute::<f32>(&s, out),
        Precision::F64 => execute::<f64>(&s, out),
    }
}

fn execute<T: Scalar>(s: &Settings, out: &Path) -> Result<Outcome, CliError> {
    let target: Tensor<T> = match &s.target {
        TargetSpec::Gabor(g, k) => config_check(make_gabor_target(*k, g))?,
        TargetSpec::Noise(k) => config_check(noise_target(*k, s.seed))?,
        TargetSpec::Image(path) => load_image_target(path)?,
    };
    let k = target.shape()[0];
    let generator = config_check(build_generator::<T>(s.kind, s.layers, s.hidden, &s.init, s.omega_0))?;
    let result = config_check(fit_kernel(&target, generator, &s.fit))?;

    dump_image(&target, out, "target")?;
    write_file(out, TRAJECTORY_FILE, result.trajectory_csv())?;
    for (step, kernel) in &result.snapshots {
        dump_image(kernel, out, &format!("kernel_step_{step}"))?;
    }
    dump_image(&result.kernel, out, "kernel_final")?;

    let mut ck = match &result.generator {
        Generator::Magnet(m) => {
            let mut ck = magnet_checkpoint(m, &s.init);
            ck.set("kind", "magnet");
            ck
        }
        Generator::Siren(net) => {
            let mut ck = Checkpoint::default();
            ck.set("kind", "siren");
            ck.set("siren.layers", net.shape.layers);
            ck.set("siren.hidden", net.shape.hidden);
            ck.set("siren.omega_0", net.shape.omega_0);
            ck.tensors = named_tensors(net, "siren");
            ck
        }
    };
    ck.set("k", k);
    ck.save(out.join("checkpoint"))?;

    if let Some(step) = result.diverged_at {
        return Err(CliError::Numeric(format!("fit diverged at step {step}")));
    }
    let last = result.records.last().copied();
    Ok(Outcome::new()
        .with("steps", last.map_or(0, |r| r.step))
        .with("final_mse", result.final_mse())
        .with("aliasing_loss", last.map_or(0.0, |r| r.aliasing_loss)))
}
