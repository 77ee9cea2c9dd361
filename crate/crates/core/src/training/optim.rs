//! Adam with per-group learning rates and a warmup + cosine schedule.

use std::collections::BTreeMap;

use crate::error::{ensure, Error, Result};
use crate::numerics::params::ParamTree;
use crate::numerics::tape::Gradients;
use crate::{Scalar, Tensor};

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Regular,
    /// Gaussian mask parameters (mean and width).
    Mask,
}

impl ParamGroup {
    /// Mask parameters are the leaves under a `mask` path segment.
    pub fn of(name: &str) -> ParamGroup {
        if name.split('.').any(|s| s == "mask") {
            ParamGroup::Mask
        } else {
            ParamGroup::Regular
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments keyed by parameter name. Moments are created lazily with the
/// parameter's shape on its first update.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(config: AdamConfig) -> Self {
        OptimState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every leaf of `params`, with the
/// learning rate chosen per parameter name by `lr`.
///
/// All gradients are checked before anything is modified: a missing or
/// non-finite gradient leaves `params` and `state` untouched and names the
/// offending parameter.
pub fn adam_step<T, M>(params: &mut M, grads: &Gradients<T>, state: &mut OptimState<T>, lr: impl Fn(&str) -> f64) -> Result<()>
where
    T: Scalar,
    M: ParamTree<Tensor<T>>,
{
    let mut problem: Option<Error> = None;
    params.visit_params("", &mut |name, p| {
        if problem.is_some() {
            return;
        }
        problem = match grads.get(name) {
            None => Some(Error::contract(format!("no gradient for parameter {name}"))),
            Some(g) if g.shape() != p.shape() => Some(Error::contract(format!(
                "gradient for {name} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            ))),
            Some(g) if !g.is_finite() => Some(Error::numeric("adam_step", format!("non-finite gradient for {name}"))),
            Some(_) => None,
        };
    });
    if let Some(e) = problem {
        return Err(e);
    }

    state.step += 1;
    let c = state.config;
    let (b1, b2, eps) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps));
    let t = state.step as i32;
    let corr1 = T::one() - T::lit(c.beta1.powi(t));
    let corr2 = T::one() - T::lit(c.beta2.powi(t));
    let (first, second) = (&mut state.first, &mut state.second);
    params.visit_params_mut("", &mut |name, p| {
        let g = &grads[name];
        let m = first.entry(name.to_owned()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = second.entry(name.to_owned()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let rate = T::lit(lr(name));
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
            let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = rate * (mi / corr1) / ((vi / corr2).sqrt() + eps);
            p.data_mut()[i] -= update;
        }
    });
    Ok(())
}

/// Warmup followed by cosine annealing; epochs may be fractional so that the
/// rate can change within an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub mask_lr_factor: f64,
}

impl ScheduleConfig {
    pub fn new(base_lr: f64, total_epochs: f64) -> Self {
        ScheduleConfig {
            base_lr,
            warmup_epochs: 5.0,
            total_epochs,
            mask_lr_factor: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_lr > 0.0, "base learning rate must be positive");
        ensure!(self.mask_lr_factor > 0.0, "mask learning-rate factor must be positive");
        ensure!(self.total_epochs > 0.0, "total epochs must be positive");
        ensure!(
            self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.total_epochs,
            "warmup ({}) must lie within the run ({})",
            self.warmup_epochs,
            self.total_epochs
        );
        Ok(())
    }
}

/// Learning rate at `epoch`: linear from 0 to `base_lr` over the warmup,
/// then `base_lr · ½(1 + cos(π · progress))` down to 0 at `total_epochs`.
/// Epochs outside `[0, total_epochs]` are clamped.
pub fn lr_at(epoch: f64, group: ParamGroup, cfg: &ScheduleConfig) -> f64 {
    let e = epoch.clamp(0.0, cfg.total_epochs);
    let regular = if e < cfg.warmup_epochs {
        cfg.base_lr * e / cfg.warmup_epochs
    } else {
        let span = cfg.total_epochs - cfg.warmup_epochs;
        let progress = if span > 0.0 { (e - cfg.warmup_epochs) / span } else { 1.0 };
        cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    };
    match group {
        ParamGroup::Regular => regular,
        ParamGroup::Mask => regular * cfg.mask_lr_factor,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    fn scalar_param(x: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::scalar(x)]
    }

    fn grad(g: f64) -> Gradients<f64> {
        Gradients::from([("0".to_owned(), Tensor::scalar(g))])
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut p = scalar_param(0.0);
        let mut st = OptimState::new(AdamConfig::default());
        for _ in 0..50 {
            adam_step(&mut p, &grad(2.5), &mut st, |_| 0.01).unwrap();
        }
        // bias correction makes every step exactly lr for a constant gradient
        assert!((p[0].data()[0] + 0.5).abs() < 1e-6);
        assert_eq!(st.step, 50);
    }

    #[test]
    fn zero_gradient_keeps_parameter_and_decays_moments() {
        let mut p = scalar_param(1.0);
        let mut st = OptimState::new(AdamConfig::default());
        adam_step(&mut p, &grad(1.0), &mut st, |_| 0.1).unwrap();
        let (x, m, v) = (p[0].data()[0], st.first["0"].data()[0], st.second["0"].data()[0]);
        // the first step still moves; later zero-gradient steps move by the decaying momentum only
        adam_step(&mut p, &grad(0.0), &mut st, |_| 0.0).unwrap();
        assert_eq!(p[0].data()[0], x);
        assert!((st.first["0"].data()[0] - 0.9 * m).abs() < 1e-15);
        assert!((st.second["0"].data()[0] - 0.999 * v).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = scalar_param(1.0);
        let mut st = OptimState::new(AdamConfig::default());
        for _ in 0..200 {
            let mut tape = Tape::new();
            let x = tape.param("0", p[0].clone());
            let loss = tape.square(x);
            let g = tape.backward(loss).unwrap().clone();
            adam_step(&mut p, &g, &mut st, |_| 0.1).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-3, "x = {}", p[0].data()[0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected_by_name() {
        let mut p = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
        let mut st = OptimState::new(AdamConfig::default());
        let g = Gradients::from([("0".to_owned(), Tensor::scalar(1.0)), ("1".to_owned(), Tensor::scalar(f64::NAN))]);
        let err = adam_step(&mut p, &g, &mut st, |_| 0.1).unwrap_err();
        assert!(err.to_string().contains("for 1"), "{err}");
        assert_eq!(p[0].data()[0], 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn groups_follow_mask_segment() {
        assert_eq!(ParamGroup::of("blocks.0.conv1.mask.sigma_raw_x"), ParamGroup::Mask);
        assert_eq!(ParamGroup::of("mask.mu_x"), ParamGroup::Mask);
        assert_eq!(ParamGroup::of("blocks.0.conv1.magnet.output.weight"), ParamGroup::Regular);
        assert_eq!(ParamGroup::of("masked"), ParamGroup::Regular);
    }

    #[test]
    fn schedule_shape() {
        let cfg = ScheduleConfig::new(0.01, 20.0);
        assert_eq!(lr_at(0.0, ParamGroup::Regular, &cfg), 0.0);
        assert_eq!(lr_at(2.5, ParamGroup::Regular, &cfg), 0.005);
        assert_eq!(lr_at(5.0, ParamGroup::Regular, &cfg), 0.01);
        assert!(lr_at(20.0 - 1e-9, ParamGroup::Regular, &cfg) < 1e-12);
        assert!((lr_at(12.5, ParamGroup::Regular, &cfg) - 0.005).abs() < 1e-15);
        for e in [0.0, 1.0, 4.9, 5.0, 7.3, 19.0] {
            let ratio = lr_at(e, ParamGroup::Mask, &cfg) / lr_at(e, ParamGroup::Regular, &cfg).max(f64::MIN_POSITIVE);
            assert!(e == 0.0 || (ratio - 0.1).abs() < 1e-12);
        }
        let no_warmup = ScheduleConfig {
            warmup_epochs: 0.0,
            ..cfg
        };
        assert_eq!(lr_at(0.0, ParamGroup::Regular, &no_warmup), 0.01);
        assert!(ScheduleConfig { warmup_epochs: 30.0, ..cfg }.validate().is_err());
    }
}
