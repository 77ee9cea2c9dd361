//! `crossres`: how well stored layers carry over to a twice-as-fine grid.
//!
//! Each layer is sampled at its trained size `k` and at `2k − 1`, and both
//! kernels are run over the same band-limited signals, the fine one on a grid
//! of half the spacing. Layers whose bandwidth bound exceeds the coarse
//! Nyquist frequency should show large errors.

use std::path::{Path, PathBuf};

use flexkernel::flexconv::{flex_kernel, resample_kernel, ConvConfig};
use flexkernel::kernelgen::{magnet_forward, make_grid, Kernel};
use flexkernel::spectral::spectrum_report;
use flexkernel::training::{cross_resolution_error, BandLimitedSignal};
use flexkernel::RngStream;

use super::{config_check, load_layers, run_keys, spectrum_config, spectrum_keys, write_file, NamedLayer, Outcome};
use crate::config::{key, ExperimentConfig, KeySpec, Need};
use crate::error::CliError;

pub const CROSSRES_FILE: &str = "crossres.csv";
pub const CSV_HEADER: &str = "layer,signal,k_src,k_dst,scale,f_plus,f_nyquist_src,relative_error";

pub fn schema() -> Vec<KeySpec> {
    let mut s = run_keys();
    s.extend([
        key("crossres.checkpoint", Need::Required),
        key("crossres.k", Need::Optional),
        key("crossres.signals", Need::Default("4")),
        key("crossres.components", Need::Default("6")),
        key("crossres.max_hz", Need::Default("2")),
        key("crossres.size", Need::Default("48")),
    ]);
    s.extend(spectrum_keys());
    s
}

/// Kernels at `k` and `2k − 1` points per axis, masked when the layer has a
/// mask, and the factor that rescales the fine one.
fn kernel_pair(layer: &NamedLayer, k: usize) -> Result<(Kernel<f64>, Kernel<f64>, f64), CliError> {
    let k_fine = 2 * k - 1;
    let conv = ConvConfig::default();
    Ok(match &layer.mask {
        Some(mask) => {
            let coarse = config_check(flex_kernel(&layer.magnet, mask, k, &conv))?;
            let (fine, scale) = config_check(resample_kernel(&layer.magnet, mask, k, k_fine, &conv))?;
            (coarse.masked, fine.masked, scale)
        }
        None => {
            let dims = layer.magnet.shape.dims;
            let coarse = magnet_forward(&make_grid(dims, k)?, &layer.magnet)?;
            let fine = magnet_forward(&make_grid(dims, k_fine)?, &layer.magnet)?;
            (coarse, fine, 0.5f64.powi(dims as i32))
        }
    })
}

pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    let dir = PathBuf::from(cfg.get::<String>("crossres.checkpoint")?);
    let spec = spectrum_config(cfg)?;
    let seed: u64 = cfg.get("run.seed")?;
    let signals: u64 = cfg.get("crossres.signals")?;
    let components: usize = cfg.get("crossres.components")?;
    let max_hz: f64 = cfg.get("crossres.max_hz")?;
    let size: usize = cfg.get("crossres.size")?;
    if signals == 0 || components == 0 || !(max_hz > 0.0) {
        return Err(CliError::Config("crossres needs at least one signal and component and a positive max_hz".into()));
    }
    let (layers, trained_k) = load_layers(&dir)?;
    let k: usize = cfg.opt("crossres.k")?.unwrap_or(trained_k);
    if k < 2 {
        return Err(CliError::Config("crossres.k must be at least 2".into()));
    }

    let root = RngStream::new(seed);
    let signals: Vec<BandLimitedSignal> = (0..signals)
        .map(|i| BandLimitedSignal::random(&mut root.derive(i), components, max_hz))
        .collect();
    let mut csv = format!("{CSV_HEADER}\n");
    let mut worst = 0.0f64;
    for layer in &layers {
        if layer.magnet.shape.dims != 2 {
            return Err(CliError::Config(format!("{}: crossres handles 2-D layers only", layer.name)));
        }
        let report = config_check(spectrum_report(&layer.magnet, layer.mask.as_ref(), k, &spec))?;
        let (coarse, fine, scale) = kernel_pair(layer, k)?;
        for (i, signal) in signals.iter().enumerate() {
            let err = config_check(cross_resolution_error(&coarse, &fine, signal, size))?;
            worst = worst.max(err);
            csv.push_str(&format!(
                "{},{i},{k},{},{scale},{},{},{err}\n",
                layer.name,
                2 * k - 1,
                report.f_plus_flexconv,
                report.f_nyquist
            ));
        }
    }
    write_file(out, CROSSRES_FILE, csv)?;
    Ok(Outcome::new().with("layers", layers.len()).with("k", k).with("max_relative_error", worst))
}
