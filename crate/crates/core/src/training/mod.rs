//! Optimisation, the kernel-fitting task and a small FlexNet classifier.

pub mod classify;
pub mod crossres;
pub mod data;
pub mod fit;
pub mod flexnet;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod targets;

pub use classify::{accuracy, metrics_csv, train_classifier, MetricsRow, TrainConfig, TrainState, METRICS_HEADER};
pub use crossres::{cross_resolution_error, BandLimitedSignal, Component};
pub use data::{bundled_data_dir, load_idx_pair, load_mnist14, Dataset};
pub use fit::{build_generator, fit_kernel, generator_on_tape, FitConfig, FitRecord, FitResult, Generator, GeneratorKind};
pub use flexnet::{
    flexnet_on_tape, flexnet_predict, init_flexnet, init_mask_for_task, mask_sigmas, BatchNorm, FlexBlock, FlexNet, FlexNetConfig, Mode,
    RunningStats, TaskKind,
};
pub use gradcheck::{GradcheckCase, GradcheckReport};
pub use loss::{combine_on_tape, layer_penalty_on_tape, magnet_penalty_on_tape, total_loss, LossBreakdown, RegTarget};
pub use optim::{adam_step, lr_at, AdamConfig, OptimState, ParamGroup, ScheduleConfig};
pub use targets::{load_image_target, make_gabor_target, noise_target, GaborTarget};
