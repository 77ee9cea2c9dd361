//! Supervised training of a [`FlexNet`] with the bandwidth penalty.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{ensure, Result};
use crate::kernelgen::checkpoint::Checkpoint;
use crate::kernelgen::grid::make_grid;
use crate::numerics::params::{load_named, named_tensors, register};
use crate::numerics::tape::{BatchStats, Tape};
use crate::spectral::SpectrumConfig;
use crate::training::data::Dataset;
use crate::training::flexnet::{argmax_rows, flexnet_on_tape, init_flexnet, flexnet_predict, update_running, FlexNet, FlexNetConfig, Mode, RunningStats};
use crate::training::loss::{combine_on_tape, layer_penalty_on_tape, RegTarget};
use crate::training::optim::{adam_step, lr_at, AdamConfig, OptimState, ParamGroup, ScheduleConfig};
use crate::{RngStream, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Schedule in epochs.
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    /// Weight of the bandwidth penalty, applied from the first step.
    pub lambda: f64,
    pub reg_target: RegTarget,
    pub spectrum: SpectrumConfig,
    /// Seed for shuffling and dropout.
    pub seed: u64,
    /// Mirror each training image horizontally with probability ½.
    pub flip: bool,
}

impl TrainConfig {
    pub fn new(epochs: usize) -> Self {
        TrainConfig {
            epochs,
            batch_size: 64,
            schedule: ScheduleConfig::new(0.01, epochs as f64),
            adam: AdamConfig::default(),
            lambda: 0.1,
            reg_target: RegTarget::Magnet,
            spectrum: SpectrumConfig::default(),
            seed: 0,
            flip: false,
        }
    }
}

/// One optimisation step; `accuracy` is set on the last step of each epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub task_loss: f64,
    pub aliasing_loss: f64,
    pub total: f64,
    pub lr_regular: f64,
    pub lr_mask: f64,
    pub accuracy: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,step,task_loss,aliasing_loss,total,lr_regular,lr_mask,accuracy";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.step, r.task_loss, r.aliasing_loss, r.total, r.lr_regular, r.lr_mask, acc
        );
    }
    s
}

/// Everything needed to resume training.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub net: FlexNet<Tensor<T>>,
    pub running: RunningStats<T>,
    pub optim: OptimState<T>,
    /// Epochs completed.
    pub epoch: usize,
    pub step: usize,
}

pub fn accuracy<T: Scalar>(net: &FlexNet<Tensor<T>>, running: &[BatchStats<T>], data: &Dataset<T>, cfg: &FlexNetConfig) -> Result<f64> {
    ensure!(!data.is_empty(), "accuracy of an empty dataset");
    let logits = flexnet_predict(net, running, &data.images, cfg, 100)?;
    let hits = argmax_rows(&logits).iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

fn flip_horizontally<T: Scalar>(images: &mut Tensor<T>, n: usize, rng: &mut RngStream) {
    let s = images.shape().to_vec();
    let (plane, w) = (s[2] * s[3], s[3]);
    let per = s[1] * plane;
    for i in 0..n {
        if rng.next_f64() < 0.5 {
            for row in images.data_mut()[i * per..(i + 1) * per].chunks_mut(w) {
                row.reverse();
            }
        }
    }
}

/// Trains until `cfg.epochs` epochs are complete, starting from (and
/// updating) `state`. Evaluates on `test` after every epoch.
pub fn train_classifier<T: Scalar>(
    state: &mut TrainState<T>,
    net_cfg: &FlexNetConfig,
    train: &Dataset<T>,
    test: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState<T>, &[MetricsRow]),
) -> Result<Vec<MetricsRow>> {
    cfg.schedule.validate()?;
    ensure!(cfg.batch_size > 0, "batch size must be positive");
    ensure!(!train.is_empty(), "empty training set");
    let k = net_cfg.kernel_size();
    let grid = make_grid::<T>(2, k)?;
    let mut rows = Vec::new();
    let root = RngStream::new(cfg.seed);
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut rng = root.derive(epoch as u64);
        let batches = train.batches(cfg.batch_size, &mut rng);
        let n_batches = batches.len();
        let first_row = rows.len();
        for (bi, idx) in batches.iter().enumerate() {
            let mut batch = train.select(idx)?;
            if cfg.flip {
                flip_horizontally(&mut batch.images, idx.len(), &mut rng);
            }
            let mut tape = Tape::new();
            let vars = register(&state.net, "", &mut tape);
            let x = tape.constant(batch.images);
            let (logits, observed) = flexnet_on_tape(&mut tape, x, &vars, &grid, net_cfg, Mode::Train(&mut rng))?;
            let task = tape.softmax_cross_entropy(logits, &batch.labels)?;
            let penalties = if cfg.lambda > 0.0 {
                vars.layers()
                    .map(|l| layer_penalty_on_tape(&mut tape, l, k, cfg.reg_target, &cfg.spectrum))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let (total, reg) = combine_on_tape(&mut tape, task, &penalties, cfg.lambda)?;
            let task_v = tape.value(task).item()?.to_f64_lossy();
            let reg_v = match reg {
                Some(r) => tape.value(r).item()?.to_f64_lossy(),
                None => 0.0,
            };
            let total_v = tape.value(total).item()?.to_f64_lossy();
            let grads = tape.backward(total)?.clone();
            let e = epoch as f64 + bi as f64 / n_batches as f64;
            let (lr_r, lr_m) = (lr_at(e, ParamGroup::Regular, &cfg.schedule), lr_at(e, ParamGroup::Mask, &cfg.schedule));
            adam_step(&mut state.net, &grads, &mut state.optim, |name| match ParamGroup::of(name) {
                ParamGroup::Regular => lr_r,
                ParamGroup::Mask => lr_m,
            })?;
            let count = idx.len() * net_cfg.input_size * net_cfg.input_size;
            update_running(&mut state.running, &observed, net_cfg.bn_momentum, count)?;
            rows.push(MetricsRow {
                epoch,
                step: state.step,
                task_loss: task_v,
                aliasing_loss: reg_v,
                total: total_v,
                lr_regular: lr_r,
                lr_mask: lr_m,
                accuracy: None,
            });
            state.step += 1;
        }
        if let Some(last) = rows.last_mut() {
            last.accuracy = Some(accuracy(&state.net, &state.running, test, net_cfg)?);
        }
        state.epoch += 1;
        on_epoch(state, &rows[first_row..]);
    }
    Ok(rows)
}

impl<T: Scalar> TrainState<T> {
    pub fn new(net: FlexNet<Tensor<T>>, running: RunningStats<T>, adam: AdamConfig) -> Self {
        TrainState {
            net,
            running,
            optim: OptimState::new(adam),
            epoch: 0,
            step: 0,
        }
    }

    /// Writes the state as a checkpoint directory: the architecture as
    /// `model.` metadata, network leaves under `net.`, statistics under
    /// `running.`, Adam moments under `adam.m.` and `adam.v.`.
    pub fn save(&self, dir: impl AsRef<Path>, net_cfg: &FlexNetConfig) -> Result<()> {
        let mut ck = Checkpoint::default();
        ck.set("kind", "flexnet_train_state");
        net_cfg.write_meta(&mut ck);
        ck.set("epoch", self.epoch);
        ck.set("step", self.step);
        ck.set("adam.step", self.optim.step);
        ck.set("adam.beta1", self.optim.config.beta1);
        ck.set("adam.beta2", self.optim.config.beta2);
        ck.set("adam.eps", self.optim.config.eps);
        ck.tensors = named_tensors(&self.net, "net");
        for (i, s) in self.running.iter().enumerate() {
            ck.tensors.push((format!("running.{i}.mean"), Tensor::from_vec(s.mean.clone())));
            ck.tensors.push((format!("running.{i}.var"), Tensor::from_vec(s.var.clone())));
        }
        for (prefix, map) in [("adam.m", &self.optim.first), ("adam.v", &self.optim.second)] {
            for (name, t) in map {
                ck.tensors.push((format!("{prefix}.{name}"), t.clone()));
            }
        }
        ck.save(dir)
    }

    /// Restores a state saved by [`TrainState::save`] together with its
    /// architecture.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, FlexNetConfig)> {
        let ck = Checkpoint::<T>::load(dir)?;
        ensure!(
            ck.get::<String>("kind")? == "flexnet_train_state",
            "checkpoint does not hold a training state"
        );
        let net_cfg = FlexNetConfig::from_meta(&ck)?;
        let tensors = ck.tensor_map();
        let (mut net, _) = init_flexnet::<T>(&net_cfg)?;
        load_named(&mut net, "net", &tensors)?;
        let mut running = Vec::new();
        while let (Some(m), Some(v)) = (
            tensors.get(&format!("running.{}.mean", running.len())),
            tensors.get(&format!("running.{}.var", running.len())),
        ) {
            running.push(BatchStats {
                mean: m.data().to_vec(),
                var: v.data().to_vec(),
            });
        }
        let mut optim = OptimState::new(AdamConfig {
            beta1: ck.get("adam.beta1")?,
            beta2: ck.get("adam.beta2")?,
            eps: ck.get("adam.eps")?,
        });
        optim.step = ck.get("adam.step")?;
        for (name, t) in &tensors {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                optim.first.insert(rest.to_owned(), t.clone());
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                optim.second.insert(rest.to_owned(), t.clone());
            }
        }
        let state = TrainState {
            net,
            running,
            optim,
            epoch: ck.get("epoch")?,
            step: ck.get("step")?,
        };
        Ok((state, net_cfg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::flexnet::init_flexnet;

    fn toy() -> (FlexNetConfig, Dataset<f64>) {
        let cfg = FlexNetConfig {
            input_size: 5,
            base_width: 2,
            magnet_hidden: 4,
            magnet_layers: 2,
            classes: 2,
            ..FlexNetConfig::desk_scale()
        };
        // class 1 images are bright on the left half
        let mut rng = RngStream::new(4);
        let n = 16;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            for _r in 0..5 {
                for c in 0..5 {
                    let base = if label == 1 && c < 2 { 1.0 } else { 0.0 };
                    data.push(base + 0.1 * rng.next_f64());
                }
            }
            labels.push(label);
        }
        let ds = Dataset {
            images: Tensor::new([n, 1, 5, 5], data).unwrap(),
            labels,
            classes: 2,
        };
        (cfg, ds)
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let (ncfg, ds) = toy();
        let mut tcfg = TrainConfig::new(3);
        tcfg.batch_size = 8;
        tcfg.schedule.warmup_epochs = 1.0;
        let run = |epochs: usize, state: &mut TrainState<f64>| {
            let cfg = TrainConfig { epochs, ..tcfg.clone() };
            train_classifier(state, &ncfg, &ds, &ds, &cfg, |_, _| {}).unwrap()
        };
        let (net, running) = init_flexnet::<f64>(&ncfg).unwrap();
        let mut a = TrainState::new(net.clone(), running.clone(), AdamConfig::default());
        let rows_a = run(3, &mut a);
        let mut b = TrainState::new(net.clone(), running.clone(), AdamConfig::default());
        let rows_b = run(3, &mut b);
        assert_eq!(metrics_csv(&rows_a), metrics_csv(&rows_b));
        assert_eq!(rows_a.len(), 6);
        assert!(rows_a[1].accuracy.is_some() && rows_a[0].accuracy.is_none());
        assert_eq!(rows_a[0].lr_regular, 0.0);
        assert!((rows_a[3].lr_mask - 0.1 * rows_a[3].lr_regular).abs() < 1e-15);

        // stop after one epoch, save, reload, finish: same parameters
        let mut c = TrainState::new(net.clone(), running, AdamConfig::default());
        run(1, &mut c);
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path(), &ncfg).unwrap();
        let (mut d, loaded_cfg) = TrainState::<f64>::load(dir.path()).unwrap();
        assert_eq!(loaded_cfg, ncfg);
        assert_eq!(d.epoch, 1);
        run(3, &mut d);
        assert_eq!(named_tensors(&d.net, ""), named_tensors(&a.net, ""));
        assert_eq!(d.running.len(), a.running.len());
    }

    #[test]
    fn metrics_csv_leaves_missing_accuracy_blank() {
        let row = MetricsRow {
            epoch: 0,
            step: 3,
            task_loss: 0.5,
            aliasing_loss: 0.0,
            total: 0.5,
            lr_regular: 0.01,
            lr_mask: 0.001,
            accuracy: None,
        };
        let csv = metrics_csv(&[row, MetricsRow { accuracy: Some(0.75), ..row }]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "0,3,0.5,0,0.5,0.01,0.001,");
        assert_eq!(lines[2], "0,3,0.5,0,0.5,0.01,0.001,0.75");
    }
}
