//! Fitting a kernel generator to a target image by minimising the MSE.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{ensure, Error, Result};
use crate::kernelgen::grid::{make_grid, CoordinateGrid};
use crate::kernelgen::init::{init_magnet, InitConfig};
use crate::kernelgen::magnet::{magnet_on_tape, Magnet, MagnetShape};
use crate::kernelgen::siren::{init_siren, siren_on_tape, Siren, SirenShape};
use crate::numerics::params::{param_count, register, ParamTree};
use crate::numerics::tape::{Tape, Var};
use crate::spectral::SpectrumConfig;
use crate::training::loss::{combine_on_tape, magnet_penalty_on_tape};
use crate::training::optim::{adam_step, lr_at, AdamConfig, OptimState, ParamGroup, ScheduleConfig};
use crate::{RngStream, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    Magnet,
    /// MAGNet with one shared envelope width per channel.
    Mgn,
    Siren,
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnet" => Ok(GeneratorKind::Magnet),
            "mgn" => Ok(GeneratorKind::Mgn),
            "siren" => Ok(GeneratorKind::Siren),
            other => Err(Error::contract(format!("unknown generator {other:?}"))),
        }
    }
}

/// A kernel generator of any supported kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Generator<P> {
    Magnet(Magnet<P>),
    Siren(Siren<P>),
}

impl<P> ParamTree<P> for Generator<P> {
    type Mapped<Q> = Generator<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Generator<Q> {
        match self {
            Generator::Magnet(m) => Generator::Magnet(m.map_params(prefix, f)),
            Generator::Siren(s) => Generator::Siren(s.map_params(prefix, f)),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        match self {
            Generator::Magnet(m) => m.visit_params_mut(prefix, f),
            Generator::Siren(s) => s.visit_params_mut(prefix, f),
        }
    }
}

/// Records the generator on `tape`; returns `[N_out, N_in, k…]`.
pub fn generator_on_tape<T: Scalar>(tape: &mut Tape<T>, grid: &CoordinateGrid<T>, g: &Generator<Var>) -> Result<Var> {
    match g {
        Generator::Magnet(m) => magnet_on_tape(tape, grid, m),
        Generator::Siren(s) => siren_on_tape(tape, grid, s),
    }
}

/// Builds a single-channel 2-D generator. SIRENs get the width whose
/// parameter count first reaches that of the equivalent MAGNet.
pub fn build_generator<T: Scalar>(kind: GeneratorKind, layers: usize, hidden: usize, init: &InitConfig, omega_0: f64) -> Result<Generator<Tensor<T>>> {
    let shape = MagnetShape {
        dims: 2,
        layers,
        hidden,
        in_channels: 1,
        out_channels: 1,
        isotropic: kind == GeneratorKind::Mgn,
    };
    let mut rng = RngStream::new(init.seed);
    let magnet = init_magnet::<T>(shape, init, &mut rng)?;
    Ok(match kind {
        GeneratorKind::Magnet | GeneratorKind::Mgn => Generator::Magnet(magnet),
        GeneratorKind::Siren => {
            let target = param_count(&magnet);
            let s = SirenShape::matching_width(2, layers, 1, 1, omega_0, target);
            Generator::Siren(init_siren(s, &mut rng)?)
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    /// Schedule in units of steps.
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    /// Weight of the bandwidth penalty (MAGNet generators only).
    pub lambda: f64,
    pub spectrum: SpectrumConfig,
    /// Stop as soon as the MSE drops below this value.
    pub stop_below: Option<f64>,
    /// Steps after which the kernel is kept in the result.
    pub snapshot_steps: Vec<usize>,
}

impl FitConfig {
    /// Constant-then-cosine schedule without warmup over `steps`.
    pub fn new(steps: usize, lr: f64) -> Self {
        FitConfig {
            steps,
            schedule: ScheduleConfig {
                warmup_epochs: 0.0,
                ..ScheduleConfig::new(lr, steps.max(1) as f64)
            },
            adam: AdamConfig::default(),
            lambda: 0.0,
            spectrum: SpectrumConfig::default(),
            stop_below: None,
            snapshot_steps: Vec::new(),
        }
    }
}

/// One row of the fitting trajectory, measured before the update of `step`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitRecord {
    pub step: usize,
    pub mse: f64,
    pub aliasing_loss: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult<T> {
    pub records: Vec<FitRecord>,
    pub generator: Generator<Tensor<T>>,
    /// Kernel produced by the final parameters, `[k, k]`.
    pub kernel: Tensor<T>,
    pub snapshots: Vec<(usize, Tensor<T>)>,
    /// First step whose loss or gradient was not finite.
    pub diverged_at: Option<usize>,
}

impl<T> FitResult<T> {
    pub fn final_mse(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.mse)
    }

    pub const CSV_HEADER: &'static str = "step,mse,aliasing_loss,total,lr";

    /// The trajectory as CSV; floats use the shortest exact representation.
    pub fn trajectory_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{}", r.step, r.mse, r.aliasing_loss, r.total, r.lr);
        }
        s
    }
}

struct StepEval<T> {
    mse: f64,
    penalty: f64,
    total: f64,
    kernel: Tensor<T>,
    grads: Option<crate::Gradients<T>>,
}

fn evaluate<T: Scalar>(
    gen: &Generator<Tensor<T>>,
    grid: &CoordinateGrid<T>,
    target: &Tensor<T>,
    cfg: &FitConfig,
    want_grads: bool,
) -> Result<StepEval<T>> {
    let k = grid.resolution();
    let mut tape = Tape::new();
    let vars = register(gen, "", &mut tape);
    let out = generator_on_tape(&mut tape, grid, &vars)?;
    let out = tape.reshape(out, &[k, k])?;
    let tgt = tape.constant(target.clone());
    let diff = tape.sub(out, tgt)?;
    let sq = tape.square(diff);
    let mse = tape.mean(sq);
    let penalties = match (&vars, cfg.lambda > 0.0) {
        (Generator::Magnet(m), true) => vec![magnet_penalty_on_tape(&mut tape, m, k, &cfg.spectrum)?],
        _ => vec![],
    };
    let (total, reg) = combine_on_tape(&mut tape, mse, &penalties, cfg.lambda)?;
    // the penalty is reported even when it is not optimised
    let penalty = match (reg, &vars) {
        (Some(r), _) => tape.value(r).item()?.to_f64_lossy(),
        (None, Generator::Magnet(m)) => {
            let p = magnet_penalty_on_tape(&mut tape, m, k, &cfg.spectrum)?;
            tape.value(p).item()?.to_f64_lossy()
        }
        (None, Generator::Siren(_)) => 0.0,
    };
    let mse_v = tape.value(mse).item()?.to_f64_lossy();
    let total_v = tape.value(total).item()?.to_f64_lossy();
    let kernel = tape.value(out).clone();
    let grads = if want_grads && total_v.is_finite() {
        tape.backward(total).ok().cloned()
    } else {
        None
    };
    Ok(StepEval {
        mse: mse_v,
        penalty,
        total: total_v,
        kernel,
        grads,
    })
}

/// Fits `generator` to the square `target` with Adam.
///
/// The trajectory holds one record per optimisation step plus a final record
/// for the trained parameters. A non-finite loss or gradient ends the run
/// early and is reported through `diverged_at` rather than as an error.
pub fn fit_kernel<T: Scalar>(target: &Tensor<T>, generator: Generator<Tensor<T>>, cfg: &FitConfig) -> Result<FitResult<T>> {
    ensure!(
        target.rank() == 2 && target.shape()[0] == target.shape()[1],
        "target must be square, got {:?}",
        target.shape()
    );
    let k = target.shape()[0];
    ensure!(k >= 5, "target must be at least 5 × 5, got {k}");
    cfg.schedule.validate()?;
    let grid = make_grid::<T>(2, k)?;
    let mut gen = generator;
    let mut state = OptimState::new(cfg.adam);
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    let mut diverged_at = None;
    let mut step = 0;
    loop {
        let done = step == cfg.steps;
        let eval = evaluate(&gen, &grid, target, cfg, !done)?;
        let lr = lr_at(step as f64, ParamGroup::Regular, &cfg.schedule);
        records.push(FitRecord {
            step,
            mse: eval.mse,
            aliasing_loss: eval.penalty,
            total: eval.total,
            lr: if done { 0.0 } else { lr },
        });
        if cfg.snapshot_steps.contains(&step) {
            snapshots.push((step, eval.kernel.clone()));
        }
        if !eval.total.is_finite() {
            diverged_at = Some(step);
            break;
        }
        if done || cfg.stop_below.is_some_and(|t| eval.mse < t) {
            break;
        }
        let Some(grads) = eval.grads else {
            diverged_at = Some(step);
            break;
        };
        if adam_step(&mut gen, &grads, &mut state, |_| lr).is_err() {
            diverged_at = Some(step);
            break;
        }
        step += 1;
    }
    let kernel = evaluate(&gen, &grid, target, cfg, false)?.kernel;
    Ok(FitResult {
        records,
        generator: gen,
        kernel,
        snapshots,
        diverged_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::constants;

    fn self_target(gen: &Generator<Tensor<f64>>, k: usize) -> Tensor<f64> {
        let grid = make_grid(2, k).unwrap();
        let mut tape = Tape::new();
        let vars = constants(gen, &mut tape);
        let out = generator_on_tape(&mut tape, &grid, &vars).unwrap();
        tape.value(out).clone().reshape([k, k]).unwrap()
    }

    #[test]
    fn self_fit_starts_at_zero() {
        for kind in [GeneratorKind::Magnet, GeneratorKind::Mgn, GeneratorKind::Siren] {
            let gen = build_generator::<f64>(kind, 2, 8, &InitConfig::default(), 30.0).unwrap();
            let target = self_target(&gen, 9);
            let res = fit_kernel(&target, gen, &FitConfig::new(3, 1e-3)).unwrap();
            assert_eq!(res.records[0].mse, 0.0, "{kind:?}");
            assert_eq!(res.records.len(), 4);
            assert!(res.diverged_at.is_none());
        }
    }

    #[test]
    fn siren_width_matches_magnet_budget() {
        let gen = build_generator::<f64>(GeneratorKind::Siren, 3, 32, &InitConfig::default(), 30.0).unwrap();
        let Generator::Siren(s) = gen else { panic!() };
        assert_eq!(s.shape.hidden, 37);
    }

    #[test]
    fn mse_decreases_and_stops_early() {
        let gen = build_generator::<f64>(GeneratorKind::Magnet, 2, 8, &InitConfig::default(), 30.0).unwrap();
        let target = crate::training::targets::make_gabor_target(9, &crate::training::targets::GaborTarget::new(1.0)).unwrap();
        let mut cfg = FitConfig::new(300, 1e-2);
        cfg.snapshot_steps = vec![0, 10];
        let res = fit_kernel(&target, gen, &cfg).unwrap();
        assert!(res.final_mse() < res.records[0].mse);
        assert_eq!(res.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 10]);
        let stop = res.records[50].mse * 1.0001;
        let early = fit_kernel(
            &target,
            build_generator::<f64>(GeneratorKind::Magnet, 2, 8, &InitConfig::default(), 30.0).unwrap(),
            &FitConfig {
                stop_below: Some(stop),
                ..cfg
            },
        )
        .unwrap();
        assert!(early.records.len() <= 52 && early.final_mse() < stop);
    }

    #[test]
    fn divergence_is_reported_not_fatal() {
        let gen = build_generator::<f64>(GeneratorKind::Magnet, 2, 4, &InitConfig::default(), 30.0).unwrap();
        let mut target = Tensor::zeros([7, 7]);
        target.set(&[3, 3], f64::NAN);
        let res = fit_kernel(&target, gen, &FitConfig::new(5, 1e-2)).unwrap();
        assert_eq!(res.diverged_at, Some(0));
        assert!(res.final_mse().is_nan());
    }

    #[test]
    fn rejects_small_or_rectangular_targets() {
        let gen = build_generator::<f64>(GeneratorKind::Magnet, 1, 2, &InitConfig::default(), 30.0).unwrap();
        assert!(fit_kernel(&Tensor::zeros([3, 3]), gen.clone(), &FitConfig::new(1, 1e-3)).is_err());
        assert!(fit_kernel(&Tensor::zeros([5, 6]), gen, &FitConfig::new(1, 1e-3)).is_err());
    }
}
