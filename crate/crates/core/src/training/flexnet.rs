//! Pooling-free residual classifier built from FlexConv blocks.

use crate::error::{ensure, Result};
use crate::flexconv::{flexconv_on_tape, kernel_size_init, ConvConfig, FlexConv, GaussianMask};
use crate::kernelgen::checkpoint::Checkpoint;
use crate::kernelgen::grid::{make_grid, CoordinateGrid};
use crate::kernelgen::init::{init_magnet, InitConfig};
use crate::kernelgen::linear::Linear;
use crate::kernelgen::magnet::MagnetShape;
use crate::numerics::params::{join, ParamTree};
use crate::numerics::tape::{BatchStats, ConvMode, Tape, Var};
use crate::{RngStream, Scalar, Tensor};

/// Kind of data a mask is initialised for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Image,
    Sequence,
}

/// Small initial mask: centred for images, at the last position (`+1`) for
/// sequences; `σ² = 0.125` on every axis.
pub fn init_mask_for_task<T: Scalar>(task: TaskKind) -> Result<GaussianMask<Tensor<T>>> {
    match task {
        TaskKind::Image => GaussianMask::for_images(2),
        TaskKind::Sequence => GaussianMask::for_sequences(),
    }
}

/// Affine part of a batch normalisation; leaves `weight` and `bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<P> {
    pub weight: P,
    pub bias: P,
}

impl<P> ParamTree<P> for BatchNorm<P> {
    type Mapped<Q> = BatchNorm<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> BatchNorm<Q> {
        BatchNorm {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// `conv → BN → ReLU → dropout → conv → BN`, added to the (projected) input
/// and passed through a ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct FlexBlock<P> {
    pub conv1: FlexConv<P>,
    pub bn1: BatchNorm<P>,
    pub conv2: FlexConv<P>,
    pub bn2: BatchNorm<P>,
    /// 1 × 1 projection `[out, in, 1, 1]`, present when the widths differ.
    pub shortcut: Option<P>,
}

impl<P> ParamTree<P> for FlexBlock<P> {
    type Mapped<Q> = FlexBlock<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> FlexBlock<Q> {
        FlexBlock {
            conv1: self.conv1.map_params(&join(prefix, "conv1"), f),
            bn1: self.bn1.map_params(&join(prefix, "bn1"), f),
            conv2: self.conv2.map_params(&join(prefix, "conv2"), f),
            bn2: self.bn2.map_params(&join(prefix, "bn2"), f),
            shortcut: self.shortcut.as_ref().map(|s| f(&join(prefix, "shortcut"), s)),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_params_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_params_mut(&join(prefix, "bn2"), f);
        if let Some(s) = &mut self.shortcut {
            f(&join(prefix, "shortcut"), s);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlexNet<P> {
    pub blocks: Vec<FlexBlock<P>>,
    pub head: Linear<P>,
}

impl<P> FlexNet<P> {
    pub fn layers(&self) -> impl Iterator<Item = &FlexConv<P>> {
        self.blocks.iter().flat_map(|b| [&b.conv1, &b.conv2])
    }
}

impl<P> ParamTree<P> for FlexNet<P> {
    type Mapped<Q> = FlexNet<Q>;

    fn map_params<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> FlexNet<Q> {
        let blocks = join(prefix, "blocks");
        FlexNet {
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map_params(&join(&blocks, &i.to_string()), f))
                .collect(),
            head: self.head.map_params(&join(prefix, "head"), f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        let blocks = join(prefix, "blocks");
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(&blocks, &i.to_string()), f);
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlexNetConfig {
    pub in_channels: usize,
    pub classes: usize,
    /// Spatial size of the (square) inputs.
    pub input_size: usize,
    pub blocks: usize,
    /// Base width `c`.
    pub base_width: usize,
    /// Block `i` has `round(c · factors[min(i, len − 1)])` channels.
    pub width_factors: Vec<f64>,
    pub magnet_layers: usize,
    pub magnet_hidden: usize,
    pub init: InitConfig,
    pub dropout: f64,
    pub conv: ConvConfig,
    pub bn_eps: f64,
    /// Weight of the newest batch in the running statistics.
    pub bn_momentum: f64,
}

impl FlexNetConfig {
    /// Two blocks of base width 8 on 14 × 14 single-channel inputs.
    pub fn desk_scale() -> Self {
        FlexNetConfig {
            in_channels: 1,
            classes: 10,
            input_size: 14,
            blocks: 2,
            base_width: 8,
            width_factors: vec![1.0, 1.5, 1.5, 2.0, 2.0],
            magnet_layers: 3,
            magnet_hidden: 32,
            init: InitConfig::default(),
            dropout: 0.2,
            conv: ConvConfig {
                mode: ConvMode::Direct,
                ..ConvConfig::default()
            },
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.blocks > 0 && self.base_width > 0, "need at least one block of positive width");
        ensure!(!self.width_factors.is_empty(), "width factors must not be empty");
        ensure!(self.width_factors.iter().all(|&f| f > 0.0), "width factors must be positive");
        ensure!((0.0..1.0).contains(&self.dropout), "dropout must lie in [0, 1)");
        ensure!(self.classes > 0 && self.in_channels > 0 && self.input_size > 0, "empty input or output");
        ensure!(!self.conv.causal, "image blocks use centred convolution");
        self.conv.validate()
    }

    pub fn widths(&self) -> Vec<usize> {
        let last = self.width_factors.len() - 1;
        (0..self.blocks)
            .map(|i| (self.base_width as f64 * self.width_factors[i.min(last)]).round() as usize)
            .collect()
    }

    /// Kernel resolution: the smallest odd size covering the input.
    pub fn kernel_size(&self) -> usize {
        kernel_size_init(self.input_size)
    }

    /// Records the architecture under `model.` keys.
    pub fn write_meta<T: Scalar>(&self, ck: &mut Checkpoint<T>) {
        ck.set("model.in_channels", self.in_channels);
        ck.set("model.classes", self.classes);
        ck.set("model.input_size", self.input_size);
        ck.set("model.blocks", self.blocks);
        ck.set("model.base_width", self.base_width);
        let factors: Vec<String> = self.width_factors.iter().map(f64::to_string).collect();
        ck.set("model.width_factors", factors.join(","));
        ck.set("model.magnet_layers", self.magnet_layers);
        ck.set("model.magnet_hidden", self.magnet_hidden);
        ck.set("model.init.alpha", self.init.alpha);
        ck.set("model.init.beta", self.init.beta);
        ck.set("model.init.linear_scale", self.init.linear_scale);
        if let Some(s) = self.init.sine_weight_scale {
            ck.set("model.init.sine_weight_scale", s);
        }
        ck.set("model.init.seed", self.init.seed);
        ck.set("model.dropout", self.dropout);
        ck.set("model.conv.fft", self.conv.mode == ConvMode::Fft);
        ck.set("model.conv.crop_threshold", self.conv.crop_threshold);
        ck.set("model.bn_eps", self.bn_eps);
        ck.set("model.bn_momentum", self.bn_momentum);
    }

    /// Inverse of [`FlexNetConfig::write_meta`].
    pub fn from_meta<T: Scalar>(ck: &Checkpoint<T>) -> Result<Self> {
        let factors: String = ck.get("model.width_factors")?;
        let width_factors = factors
            .split(',')
            .map(|f| f.parse::<f64>().map_err(|_| crate::Error::format("checkpoint", format!("bad width factor {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let cfg = FlexNetConfig {
            in_channels: ck.get("model.in_channels")?,
            classes: ck.get("model.classes")?,
            input_size: ck.get("model.input_size")?,
            blocks: ck.get("model.blocks")?,
            base_width: ck.get("model.base_width")?,
            width_factors,
            magnet_layers: ck.get("model.magnet_layers")?,
            magnet_hidden: ck.get("model.magnet_hidden")?,
            init: InitConfig {
                alpha: ck.get("model.init.alpha")?,
                beta: ck.get("model.init.beta")?,
                linear_scale: ck.get("model.init.linear_scale")?,
                sine_weight_scale: ck.get("model.init.sine_weight_scale").ok(),
                seed: ck.get("model.init.seed")?,
            },
            dropout: ck.get("model.dropout")?,
            conv: ConvConfig {
                mode: if ck.get::<bool>("model.conv.fft")? { ConvMode::Fft } else { ConvMode::Direct },
                causal: false,
                crop_threshold: ck.get("model.conv.crop_threshold")?,
            },
            bn_eps: ck.get("model.bn_eps")?,
            bn_momentum: ck.get("model.bn_momentum")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Running normalisation statistics, two per block.
pub type RunningStats<T> = Vec<BatchStats<T>>;

fn flexconv_layer<T: Scalar>(cfg: &FlexNetConfig, cin: usize, cout: usize, rng: &mut RngStream) -> Result<FlexConv<Tensor<T>>> {
    let shape = MagnetShape {
        dims: 2,
        layers: cfg.magnet_layers,
        hidden: cfg.magnet_hidden,
        in_channels: cin,
        out_channels: cout,
        isotropic: false,
    };
    Ok(FlexConv {
        magnet: init_magnet(shape, &cfg.init, rng)?,
        mask: init_mask_for_task(TaskKind::Image)?,
    })
}

fn batch_norm<T: Scalar>(c: usize) -> BatchNorm<Tensor<T>> {
    BatchNorm {
        weight: Tensor::ones([c]),
        bias: Tensor::zeros([c]),
    }
}

fn fresh_stats<T: Scalar>(c: usize) -> BatchStats<T> {
    BatchStats {
        mean: vec![T::zero(); c],
        var: vec![T::one(); c],
    }
}

/// Draws a network and its initial running statistics (zero mean, unit
/// variance). Every FlexConv gets its own stream derived from the
/// configured seed.
pub fn init_flexnet<T: Scalar>(cfg: &FlexNetConfig) -> Result<(FlexNet<Tensor<T>>, RunningStats<T>)> {
    cfg.validate()?;
    let root = RngStream::new(cfg.init.seed);
    let mut blocks = Vec::new();
    let mut running = Vec::new();
    let mut cin = cfg.in_channels;
    for (i, cout) in cfg.widths().into_iter().enumerate() {
        let mut rng = root.derive(i as u64);
        let conv1 = flexconv_layer(cfg, cin, cout, &mut rng)?;
        let conv2 = flexconv_layer(cfg, cout, cout, &mut rng)?;
        let shortcut = if cin != cout {
            let bound = 1.0 / (cin as f64).sqrt();
            Some(rng.uniform(-bound, bound, cout * cin)?.reshape([cout, cin, 1, 1])?)
        } else {
            None
        };
        blocks.push(FlexBlock {
            conv1,
            bn1: batch_norm(cout),
            conv2,
            bn2: batch_norm(cout),
            shortcut,
        });
        running.push(fresh_stats(cout));
        running.push(fresh_stats(cout));
        cin = cout;
    }
    let mut rng = root.derive(u64::MAX);
    let bound = 1.0 / (cin as f64).sqrt();
    let head = Linear {
        weight: rng.uniform(-bound, bound, cfg.classes * cin)?.reshape([cfg.classes, cin])?,
        bias: rng.uniform(-bound, bound, cfg.classes)?,
    };
    Ok((FlexNet { blocks, head }, running))
}

/// How normalisation and dropout behave during a forward pass.
pub enum Mode<'a, T> {
    /// Batch statistics and active dropout drawn from the stream.
    Train(&'a mut RngStream),
    /// Running statistics, no dropout.
    Eval(&'a [BatchStats<T>]),
}

/// Logits `[B, classes]` for `x: [B, C, H, W]`, with the batch statistics
/// observed by each normalisation (empty in evaluation mode).
pub fn flexnet_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    net: &FlexNet<Var>,
    grid: &CoordinateGrid<T>,
    cfg: &FlexNetConfig,
    mut mode: Mode<'_, T>,
) -> Result<(Var, Vec<BatchStats<T>>)> {
    let xs = tape.shape(x).to_vec();
    ensure!(xs.len() == 4, "inputs must be [B, C, H, W], got {xs:?}");
    ensure!(xs[0] > 0, "empty batch");
    ensure!(
        kernel_size_init(xs[2].max(xs[3])) == grid.resolution(),
        "inputs of size {}×{} need a {}-point kernel grid, got {}",
        xs[2],
        xs[3],
        kernel_size_init(xs[2].max(xs[3])),
        grid.resolution()
    );
    let eps = T::lit(cfg.bn_eps);
    let mut observed = Vec::new();
    let mut h = x;
    for (i, block) in net.blocks.iter().enumerate() {
        let mut norm = |tape: &mut Tape<T>, v: Var, bn: &BatchNorm<Var>, j: usize, mode: &Mode<'_, T>| -> Result<Var> {
            let stats = match mode {
                Mode::Train(_) => None,
                Mode::Eval(running) => Some(&running[2 * i + j]),
            };
            let (y, st) = tape.batch_norm(v, bn.weight, bn.bias, stats, eps)?;
            if stats.is_none() {
                observed.push(st);
            }
            Ok(y)
        };
        let a = flexconv_on_tape(tape, h, grid, &block.conv1, &cfg.conv)?;
        let a = norm(tape, a, &block.bn1, 0, &mode)?;
        let a = tape.relu(a);
        let a = match &mut mode {
            Mode::Train(rng) if cfg.dropout > 0.0 => dropout(tape, a, cfg.dropout, rng)?,
            _ => a,
        };
        let a = flexconv_on_tape(tape, a, grid, &block.conv2, &cfg.conv)?;
        let a = norm(tape, a, &block.bn2, 1, &mode)?;
        let skip = match block.shortcut {
            Some(w) => tape.conv(h, w, &[(0, 0), (0, 0)], ConvMode::Direct)?,
            None => h,
        };
        let sum = tape.add(a, skip)?;
        h = tape.relu(sum);
    }
    let pooled = tape.mean_spatial(h)?;
    let logits = tape.linear(pooled, net.head.weight, Some(net.head.bias))?;
    Ok((logits, observed))
}

/// Inverted dropout: survivors are scaled by `1 / (1 − p)`.
fn dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, p: f64, rng: &mut RngStream) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let keep = T::lit(1.0 / (1.0 - p));
    let n: usize = shape.iter().product();
    let mask: Vec<T> = (0..n).map(|_| if rng.next_f64() < p { T::zero() } else { keep }).collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

/// Blends observed batch statistics into the running ones. Variances are
/// stored unbiased, using `count` values per channel.
pub fn update_running<T: Scalar>(running: &mut [BatchStats<T>], observed: &[BatchStats<T>], momentum: f64, count: usize) -> Result<()> {
    ensure!(running.len() == observed.len(), "expected {} statistics, got {}", running.len(), observed.len());
    let m = T::lit(momentum);
    let unbias = T::lit(if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 });
    for (r, o) in running.iter_mut().zip(observed) {
        for (a, &b) in r.mean.iter_mut().zip(&o.mean) {
            *a = (T::one() - m) * *a + m * b;
        }
        for (a, &b) in r.var.iter_mut().zip(&o.var) {
            *a = (T::one() - m) * *a + m * b * unbias;
        }
    }
    Ok(())
}

/// Evaluation-mode logits for a whole tensor of inputs, in chunks.
pub fn flexnet_predict<T: Scalar>(net: &FlexNet<Tensor<T>>, running: &[BatchStats<T>], images: &Tensor<T>, cfg: &FlexNetConfig, chunk: usize) -> Result<Tensor<T>> {
    let grid = make_grid::<T>(2, cfg.kernel_size())?;
    let s = images.shape();
    let per: usize = s[1..].iter().product();
    let mut out = Vec::with_capacity(s[0] * cfg.classes);
    for start in (0..s[0]).step_by(chunk.max(1)) {
        let n = chunk.max(1).min(s[0] - start);
        let mut shape = s.to_vec();
        shape[0] = n;
        let batch = Tensor::new(shape, images.data()[start * per..(start + n) * per].to_vec())?;
        let mut tape = Tape::new();
        let vars = crate::numerics::params::constants(net, &mut tape);
        let x = tape.constant(batch);
        let (logits, _) = flexnet_on_tape(&mut tape, x, &vars, &grid, cfg, Mode::Eval(running))?;
        out.extend_from_slice(tape.value(logits).data());
    }
    Tensor::new([s[0], cfg.classes], out)
}

/// Index of the largest logit per row.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Mask standard deviations `[σ_x, σ_y]` of every FlexConv, in order.
pub fn mask_sigmas<T: Scalar>(net: &FlexNet<Tensor<T>>) -> Vec<Vec<f64>> {
    net.layers().map(|l| l.mask.sigmas().iter().map(|s| s.to_f64_lossy()).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::{constants, param_count};

    fn tiny() -> FlexNetConfig {
        FlexNetConfig {
            input_size: 6,
            base_width: 2,
            magnet_hidden: 4,
            magnet_layers: 2,
            classes: 3,
            ..FlexNetConfig::desk_scale()
        }
    }

    #[test]
    fn widths_follow_factor_schedule() {
        let cfg = FlexNetConfig {
            blocks: 7,
            base_width: 22,
            ..FlexNetConfig::desk_scale()
        };
        assert_eq!(cfg.widths(), vec![22, 33, 33, 44, 44, 44, 44]);
        assert_eq!(FlexNetConfig::desk_scale().widths(), vec![8, 12]);
    }

    #[test]
    fn mask_init_rules() {
        let img = init_mask_for_task::<f64>(TaskKind::Image).unwrap();
        assert_eq!(img.centres(), vec![0.0, 0.0]);
        for s in img.sigmas() {
            assert!((s * s - 0.125).abs() < 1e-12);
        }
        let seq = init_mask_for_task::<f64>(TaskKind::Sequence).unwrap();
        assert_eq!(seq.centres(), vec![1.0]);
        let w = crate::flexconv::gaussian_mask(&make_grid(1, 9).unwrap(), &seq).unwrap();
        assert_eq!(w.data()[8], 1.0);
    }

    #[test]
    fn zero_head_gives_bias_logits() {
        let cfg = tiny();
        let (mut net, running) = init_flexnet::<f64>(&cfg).unwrap();
        net.head.weight = Tensor::zeros([3, cfg.widths()[1]]);
        net.head.bias = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let x: Tensor<f64> = RngStream::new(1).uniform(0.0, 1.0, 2 * 36).unwrap().reshape([2, 1, 6, 6]).unwrap();
        let logits = flexnet_predict(&net, &running, &x, &cfg, 8).unwrap();
        assert_eq!(logits.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn identity_block_on_single_pixel_is_linear_in_pooled_input() {
        let cfg = FlexNetConfig {
            input_size: 1,
            in_channels: 2,
            base_width: 2,
            blocks: 1,
            magnet_hidden: 3,
            magnet_layers: 2,
            classes: 2,
            ..FlexNetConfig::desk_scale()
        };
        let (mut net, running) = init_flexnet::<f64>(&cfg).unwrap();
        let b = &mut net.blocks[0];
        assert!(b.shortcut.is_none());
        // second convolution outputs zero; its normalisation has zero shift
        b.conv2.magnet.output.weight = Tensor::zeros(b.conv2.magnet.output.weight.shape().to_vec());
        b.conv2.magnet.output.bias = Tensor::zeros(b.conv2.magnet.output.bias.shape().to_vec());
        let x = Tensor::from_f64([3, 2, 1, 1], &[0.3, 1.2, 0.0, 2.0, 5.0, 0.1]).unwrap();
        let logits = flexnet_predict(&net, &running, &x, &cfg, 3).unwrap();
        let w = &net.head.weight;
        for n in 0..3 {
            for c in 0..2 {
                let expect = w.get(&[c, 0]) * x.get(&[n, 0, 0, 0]) + w.get(&[c, 1]) * x.get(&[n, 1, 0, 0]) + net.head.bias.data()[c];
                assert!((logits.get(&[n, c]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn train_mode_reports_stats_and_eval_is_deterministic() {
        let cfg = tiny();
        let (net, running) = init_flexnet::<f64>(&cfg).unwrap();
        assert_eq!(running.len(), 4);
        assert!(param_count(&net) > 0);
        let grid = make_grid(2, cfg.kernel_size()).unwrap();
        let x: Tensor<f64> = RngStream::new(2).uniform(0.0, 1.0, 4 * 36).unwrap().reshape([4, 1, 6, 6]).unwrap();
        let mut tape = Tape::new();
        let vars = constants(&net, &mut tape);
        let xv = tape.constant(x.clone());
        let mut rng = RngStream::new(0);
        let (logits, stats) = flexnet_on_tape(&mut tape, xv, &vars, &grid, &cfg, Mode::Train(&mut rng)).unwrap();
        assert_eq!(tape.shape(logits), &[4, 3]);
        assert_eq!(stats.len(), 4);
        let a = flexnet_predict(&net, &running, &x, &cfg, 3).unwrap();
        let b = flexnet_predict(&net, &running, &x, &cfg, 4).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        let empty = tape.constant(Tensor::zeros([0, 1, 6, 6]));
        assert!(flexnet_on_tape(&mut tape, empty, &vars, &grid, &cfg, Mode::Eval(&running)).is_err());
    }

    #[test]
    fn running_stats_blend() {
        let mut r = vec![BatchStats { mean: vec![0.0f64], var: vec![1.0] }];
        let o = vec![BatchStats { mean: vec![2.0], var: vec![3.0] }];
        update_running(&mut r, &o, 0.1, 4).unwrap();
        assert!((r[0].mean[0] - 0.2).abs() < 1e-15);
        assert!((r[0].var[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-15);
    }
}
