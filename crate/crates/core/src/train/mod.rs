//! Rate-distortion training: objective, metrics, optimizer and loop.

pub mod adam;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod trainer;

pub use adam::{adam_step, clip_global_norm, collect_grads, global_norm, AdamState};
pub use data::{image_paths, synthetic_image, synthetic_set, Dataset};
pub use loss::{rd_loss, Distortion, LossTerms};
pub use metrics::{mse, msssim, msssim_db, msssim_var, psnr, psnr_from_mse};
pub use trainer::{train_loop, StepRecord, TrainConfig, Trainer, FINAL_CHECKPOINT, LOG_FILE, LOG_HEADER};
