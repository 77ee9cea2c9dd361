//! Task loss plus the weighted bandwidth penalty.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flexconv::FlexConv;
use crate::kernelgen::magnet::Magnet;
use crate::numerics::tape::{Tape, Var};
use crate::spectral::{aliasing_loss_on_tape, max_freq_magnet_on_tape, max_freq_mask_on_tape, nyquist, SpectrumConfig};
use crate::Scalar;

/// Which bound the penalty is applied to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RegTarget {
    /// The network alone; the mask's spread is not penalised.
    #[default]
    Magnet,
    /// Network plus mask.
    FlexConv,
}

impl FromStr for RegTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnet" => Ok(RegTarget::Magnet),
            "flexconv" => Ok(RegTarget::FlexConv),
            other => Err(Error::contract(format!("unknown regularization target {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub task_loss: f64,
    /// Penalty summed over every regularized layer.
    pub aliasing_loss_total: f64,
    pub lambda: f64,
    /// `task_loss + lambda · aliasing_loss_total`.
    pub total: f64,
}

/// Combines a task loss with per-layer penalties.
pub fn total_loss(task_loss: f64, layer_penalties: &[f64], lambda: f64) -> LossBreakdown {
    let aliasing_loss_total = layer_penalties.iter().sum();
    LossBreakdown {
        task_loss,
        aliasing_loss_total,
        lambda,
        total: task_loss + lambda * aliasing_loss_total,
    }
}

/// Penalty of one network sampled at `k` points per axis; shape `[1]`.
pub fn magnet_penalty_on_tape<T: Scalar>(tape: &mut Tape<T>, m: &Magnet<Var>, k: usize, cfg: &SpectrumConfig) -> Result<Var> {
    let f = max_freq_magnet_on_tape(tape, m, cfg)?;
    Ok(aliasing_loss_on_tape(tape, f, nyquist(k)?))
}

/// Penalty of one FlexConv layer sampled at `k` points per axis.
pub fn layer_penalty_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    layer: &FlexConv<Var>,
    k: usize,
    target: RegTarget,
    cfg: &SpectrumConfig,
) -> Result<Var> {
    let mut f = max_freq_magnet_on_tape(tape, &layer.magnet, cfg)?;
    if target == RegTarget::FlexConv {
        let fm = max_freq_mask_on_tape(tape, &layer.mask, cfg)?;
        f = tape.add(f, fm)?;
    }
    Ok(aliasing_loss_on_tape(tape, f, nyquist(k)?))
}

/// `task + λ · Σ penalties` on the tape, with the summed penalty alongside.
pub fn combine_on_tape<T: Scalar>(tape: &mut Tape<T>, task: Var, penalties: &[Var], lambda: f64) -> Result<(Var, Option<Var>)> {
    let Some((&first, rest)) = penalties.split_first() else {
        return Ok((task, None));
    };
    let mut reg = first;
    for &p in rest {
        reg = tape.add(reg, p)?;
    }
    let weighted = tape.scale(reg, T::lit(lambda));
    let task_shape = tape.shape(task).to_vec();
    let weighted = tape.reshape(weighted, &task_shape)?;
    Ok((tape.add(task, weighted)?, Some(reg)))
}
