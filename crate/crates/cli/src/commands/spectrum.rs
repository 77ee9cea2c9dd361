//! `spectrum`: analytic bounds against the measured spectrum of stored layers.

use std::path::{Path, PathBuf};

use flexkernel::flexconv::gaussian_mask;
use flexkernel::kernelgen::{magnet_forward, make_grid};
use flexkernel::spectral::{spectrum_report, SpectrumReport};
use flexkernel::{fft_nd, Tensor};

use super::{config_check, load_layers, run_keys, spectrum_config, spectrum_keys, write_file, Outcome};
use crate::config::{key, ExperimentConfig, KeySpec, Need};
use crate::dump::dump_image;
use crate::error::CliError;

pub const SPECTRUM_FILE: &str = "spectrum.csv";

pub fn schema() -> Vec<KeySpec> {
    let mut s = run_keys();
    s.extend([key("spectrum.checkpoint", Need::Required), key("spectrum.k", Need::Optional)]);
    s.extend(spectrum_keys());
    s
}

pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    let dir = PathBuf::from(cfg.get::<String>("spectrum.checkpoint")?);
    let spec = spectrum_config(cfg)?;
    let (layers, trained_k) = load_layers(&dir)?;
    let k = cfg.opt("spectrum.k")?.unwrap_or(trained_k);

    let mut csv = format!("{}\n", SpectrumReport::CSV_HEADER);
    let mut worst = 0.0f64;
    let mut violations = 0;
    for layer in &layers {
        let r = config_check(spectrum_report(&layer.magnet, layer.mask.as_ref(), k, &spec))?;
        csv.push_str(&r.csv_row(&layer.name));
        csv.push('\n');
        worst = worst.max(r.f_plus_flexconv / r.f_nyquist);
        violations += (r.aliasing_loss > 0.0) as usize;
        if layer.magnet.shape.dims == 2 {
            dump_image(&magnitude_spectrum(layer, k)?, out, &format!("spectrum_{}", layer.name))?;
        }
    }
    write_file(out, SPECTRUM_FILE, csv)?;
    Ok(Outcome::new()
        .with("layers", layers.len())
        .with("k", k)
        .with("above_nyquist", violations)
        .with("max_bound_over_nyquist", worst))
}

/// Centred DFT magnitude of the first channel pair of a 2-D layer, masked
/// when the layer has a mask.
fn magnitude_spectrum(layer: &super::NamedLayer, k: usize) -> Result<Tensor<f64>, CliError> {
    let grid = make_grid::<f64>(2, k)?;
    let kernel = magnet_forward(&grid, &layer.magnet)?;
    let mut values = kernel.channel(0, 0).to_vec();
    if let Some(mask) = &layer.mask {
        let w = gaussian_mask(&grid, mask)?;
        values.iter_mut().zip(w.data()).for_each(|(v, w)| *v *= w);
    }
    let mag = fft_nd(&Tensor::new([k, k], values)?, &[0, 1])?.magnitude();
    let mag = mag.data();
    let half = k / 2;
    // move frequency 0 to the centre
    let mut centred = vec![0.0; k * k];
    for r in 0..k {
        for c in 0..k {
            centred[((r + half) % k) * k + (c + half) % k] = mag[r * k + c];
        }
    }
    Ok(Tensor::new([k, k], centred)?)
}
