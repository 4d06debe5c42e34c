//! Training loop, evaluation driver, baselines, caption sensitivity and
//! checkpoint files.

pub mod checkpoint;
pub mod eval;
pub mod gradcheck;
pub mod sensitivity;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use eval::{evaluate, fit_global_baseline, Evaluation, ImageRow, Predictor};
pub use gradcheck::pipeline_grad_check;
pub use sensitivity::{caption_sensitivity, ImageSensitivity, SensitivityReport};
pub use train::{train, train_samples, CaptionSampling, Checkpoint, EpochLog, TrainConfig};
