//! The five experiment commands and what they share.

pub mod crossres;
pub mod fit;
pub mod gradcheck;
pub mod spectrum;
pub mod train;

use std::path::Path;
use std::str::FromStr;

use flexkernel::flexconv::GaussianMask;
use flexkernel::kernelgen::checkpoint::{magnet_from_checkpoint, Checkpoint};
use flexkernel::kernelgen::Magnet;
use flexkernel::spectral::{SpectrumConfig, Taper};
use flexkernel::training::TrainState;
use flexkernel::Tensor;

use crate::config::{key, ExperimentConfig, KeySpec, Need};
use crate::error::CliError;

/// What a successful command reports on stdout.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    /// `key=value` pairs appended to the success line.
    pub summary: Vec<(String, String)>,
}

impl Outcome {
    pub fn new() -> Self {
        Outcome { summary: Vec::new() }
    }

    pub fn with(mut self, k: &str, v: impl ToString) -> Self {
        self.summary.push((k.to_owned(), v.to_string()));
        self
    }
}

impl Default for Outcome {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn run_keys() -> Vec<KeySpec> {
    vec![key("run.output_dir", Need::Required), key("run.seed", Need::Default("1"))]
}

pub(crate) fn spectrum_keys() -> Vec<KeySpec> {
    vec![
        key("spectrum.sigma_cut", Need::Default("2")),
        key("spectrum.significance_ratio", Need::Default("0.001")),
        key("spectrum.signed_weights", Need::Default("false")),
        key("spectrum.taper", Need::Default("rectangular")),
    ]
}

pub(crate) fn spectrum_config(cfg: &ExperimentConfig) -> Result<SpectrumConfig, CliError> {
    let s = SpectrumConfig {
        sigma_cut: cfg.get("spectrum.sigma_cut")?,
        significance_ratio: cfg.get("spectrum.significance_ratio")?,
        signed_weights: cfg.get("spectrum.signed_weights")?,
        taper: cfg.get::<Taper>("spectrum.taper")?,
    };
    config_check(s.validate())?;
    Ok(s)
}

/// Floating-point type a run computes in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(CliError::Config(format!("unknown precision {other:?}"))),
        }
    }
}

/// Reports a library precondition failure caused by configured values as a
/// configuration error.
pub(crate) fn config_check<V>(r: flexkernel::Result<V>) -> Result<V, CliError> {
    r.map_err(|e| match e {
        flexkernel::Error::Contract(m) => CliError::Config(m),
        other => other.into(),
    })
}

pub(crate) fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))
}

/// One analysable kernel generator with its optional size mask.
pub struct NamedLayer {
    pub name: String,
    pub magnet: Magnet<Tensor<f64>>,
    pub mask: Option<GaussianMask<Tensor<f64>>>,
}

/// Layers stored in a checkpoint written by `fit` (one network, no mask)
/// or `train` (every FlexConv layer), and the kernel size they were trained
/// at.
pub fn load_layers(dir: &Path) -> Result<(Vec<NamedLayer>, usize), CliError> {
    let ck = Checkpoint::<f64>::load(dir)?;
    let kind: String = ck.get("kind").map_err(|_| CliError::Config(format!("{}: checkpoint has no kind", dir.display())))?;
    match kind.as_str() {
        "magnet" => {
            let (magnet, _) = magnet_from_checkpoint(&ck)?;
            let k = ck.get("k")?;
            Ok((vec![NamedLayer { name: "magnet".into(), magnet, mask: None }], k))
        }
        "flexnet_train_state" => {
            let (state, net_cfg) = TrainState::<f64>::load(dir)?;
            let layers = state
                .net
                .blocks
                .iter()
                .enumerate()
                .flat_map(|(i, b)| [(format!("blocks.{i}.conv1"), &b.conv1), (format!("blocks.{i}.conv2"), &b.conv2)])
                .map(|(name, l)| NamedLayer {
                    name,
                    magnet: l.magnet.clone(),
                    mask: Some(l.mask.clone()),
                })
                .collect();
            Ok((layers, net_cfg.kernel_size()))
        }
        other => Err(CliError::Config(format!(
            "{}: checkpoint kind {other:?} has no analysable layers",
            dir.display()
        ))),
    }
}
