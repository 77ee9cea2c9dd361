//! `train`: a FlexNet classifier on 14 × 14 digits.

use std::path::{Path, PathBuf};

use flexkernel::flexconv::{flex_kernel, gaussian_mask};
use flexkernel::kernelgen::{make_grid, InitConfig};
use flexkernel::training::{
    bundled_data_dir, init_flexnet, load_mnist14, mask_sigmas, metrics_csv, train_classifier, FlexNetConfig, RegTarget, TrainConfig,
    TrainState,
};
use flexkernel::{ConvMode, Scalar};

use super::{config_check, run_keys, spectrum_config, spectrum_keys, write_file, Outcome, Precision};
use crate::config::{key, ExperimentConfig, KeySpec, Need};
use crate::dump::dump_image;
use crate::error::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const STATE_DIR: &str = "state";

pub fn schema() -> Vec<KeySpec> {
    let mut s = run_keys();
    s.extend([
        key("run.precision", Need::Default("f64")),
        key("run.resume", Need::Optional),
        key("data.dir", Need::Optional),
        key("data.train_size", Need::Optional),
        key("data.test_size", Need::Optional),
        key("model.blocks", Need::Default("2")),
        key("model.width", Need::Default("8")),
        key("model.magnet_layers", Need::Default("3")),
        key("model.magnet_hidden", Need::Default("32")),
        key("model.alpha", Need::Default("6")),
        key("model.beta", Need::Default("1")),
        key("model.dropout", Need::Default("0.2")),
        key("model.conv_mode", Need::Default("direct")),
        key("optim.epochs", Need::Default("20")),
        key("optim.batch_size", Need::Default("64")),
        key("optim.lr", Need::Default("0.01")),
        key("optim.warmup_epochs", Need::Default("5")),
        key("optim.mask_lr_factor", Need::Default("0.1")),
        key("optim.lambda", Need::Default("0.1")),
        key("optim.reg_target", Need::Default("magnet")),
        key("optim.flip", Need::Default("false")),
    ]);
    s.extend(spectrum_keys());
    s
}

struct Settings {
    precision: Precision,
    resume: Option<PathBuf>,
    data_dir: PathBuf,
    train_size: Option<usize>,
    test_size: Option<usize>,
    net: FlexNetConfig,
    train: TrainConfig,
}

fn settings(cfg: &ExperimentConfig) -> Result<Settings, CliError> {
    let seed = cfg.get("run.seed")?;
    let epochs = cfg.get("optim.epochs")?;
    let mut train = TrainConfig::new(epochs);
    train.seed = seed;
    train.batch_size = cfg.get("optim.batch_size")?;
    train.schedule.base_lr = cfg.get("optim.lr")?;
    train.schedule.warmup_epochs = cfg.get("optim.warmup_epochs")?;
    train.schedule.mask_lr_factor = cfg.get("optim.mask_lr_factor")?;
    train.lambda = cfg.get("optim.lambda")?;
    train.reg_target = cfg.get::<RegTarget>("optim.reg_target")?;
    train.flip = cfg.get("optim.flip")?;
    train.spectrum = spectrum_config(cfg)?;
    config_check(train.schedule.validate())?;
    if train.batch_size == 0 {
        return Err(CliError::Config("optim.batch_size must be positive".into()));
    }
    let net = FlexNetConfig {
        blocks: cfg.get("model.blocks")?,
        base_width: cfg.get("model.width")?,
        magnet_layers: cfg.get("model.magnet_layers")?,
        magnet_hidden: cfg.get("model.magnet_hidden")?,
        init: InitConfig {
            alpha: cfg.get("model.alpha")?,
            beta: cfg.get("model.beta")?,
            seed,
            ..InitConfig::default()
        },
        dropout: cfg.get("model.dropout")?,
        ..FlexNetConfig::desk_scale()
    };
    let mut net = net;
    net.conv.mode = match cfg.get::<String>("model.conv_mode")?.as_str() {
        "direct" => ConvMode::Direct,
        "fft" => ConvMode::Fft,
        other => return Err(CliError::Config(format!("unknown model.conv_mode {other:?}"))),
    };
    config_check(net.init.validate())?;
    config_check(net.validate())?;
    Ok(Settings {
        precision: cfg.get("run.precision")?,
        resume: cfg.opt::<String>("run.resume")?.map(PathBuf::from),
        data_dir: cfg.opt::<String>("data.dir")?.map_or_else(bundled_data_dir, PathBuf::from),
        train_size: cfg.opt("data.train_size")?,
        test_size: cfg.opt("data.test_size")?,
        net,
        train,
    })
}

pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    let s = settings(cfg)?;
    match s.precision {
        Precision::F32 => execute::<f32>(s, out),
        Precision::F64 => execute::<f64>(s, out),
    }
}

fn execute<T: Scalar>(mut s: Settings, out: &Path) -> Result<Outcome, CliError> {
    let (mut train, mut test) = load_mnist14::<T>(&s.data_dir)?;
    if let Some(n) = s.train_size {
        train = config_check(train.head(n))?;
    }
    if let Some(n) = s.test_size {
        test = config_check(test.head(n))?;
    }
    let shape = train.images.shape().to_vec();
    s.net.in_channels = shape[1];
    s.net.input_size = shape[2];
    s.net.classes = train.classes;

    let mut state = match &s.resume {
        Some(dir) => {
            let (state, saved) = TrainState::<T>::load(dir)?;
            if saved != s.net {
                return Err(CliError::Config(format!("{}: saved architecture differs from the configured one", dir.display())));
            }
            state
        }
        None => {
            let (net, running) = config_check(init_flexnet::<T>(&s.net))?;
            TrainState::new(net, running, s.train.adam)
        }
    };

    let mut rows = Vec::new();
    let state_dir = out.join(STATE_DIR);
    let mut io_error = None;
    let result = train_classifier(&mut state, &s.net, &train, &test, &s.train, |st, new_rows| {
        rows.extend_from_slice(new_rows);
        // keep the artifacts current so an interrupted run can resume
        let saved = write_file(out, METRICS_FILE, metrics_csv(&rows)).and_then(|_| st.save(&state_dir, &s.net).map_err(CliError::from));
        if let Err(e) = saved {
            io_error.get_or_insert(e);
        }
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    let all_rows = config_check(result)?;
    write_file(out, METRICS_FILE, metrics_csv(&all_rows))?;
    state.save(&state_dir, &s.net)?;

    let k = s.net.kernel_size();
    let grid = make_grid::<T>(2, k)?;
    for (i, block) in state.net.blocks.iter().enumerate() {
        for (j, layer) in [&block.conv1, &block.conv2].into_iter().enumerate() {
            let name = format!("blocks.{i}.conv{}", j + 1);
            let mask = gaussian_mask(&grid, &layer.mask)?.reshape([k, k])?;
            dump_image(&mask, out, &format!("mask_{name}"))?;
            let fk = flex_kernel(&layer.magnet, &layer.mask, k, &s.net.conv)?;
            let first = fk.masked.channel(0, 0).to_vec();
            dump_image(&flexkernel::Tensor::new([k, k], first)?, out, &format!("kernel_{name}"))?;
        }
    }

    let last_acc = all_rows.iter().rev().find_map(|r| r.accuracy);
    let sigmas: Vec<String> = mask_sigmas(&state.net)
        .iter()
        .map(|v| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/"))
        .collect();
    Ok(Outcome::new()
        .with("epochs", state.epoch)
        .with("test_accuracy", last_acc.map_or("none".into(), |a| a.to_string()))
        .with("mask_sigmas", sigmas.join(";")))
}
