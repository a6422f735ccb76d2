//! Toy pixel-space DDPM with an object-wise control branch.

pub mod data;
pub mod loss;
pub mod model;
pub mod sample;
pub mod schedule;
pub mod train;

pub use loss::{control_loss, dual_finetune_loss, reconstruction_loss, squared_error, LossBatch};
pub use model::{ControlInput, DenoiserConfig, DenoiserModel, ModelCond, NoisePredictor};
pub use sample::{generate_foreground_pool, sample_batch, sample_image};
pub use schedule::{forward_noise, make_noise_schedule, NoiseSchedule, ScheduleKind};
pub use train::{train_control, train_finetune, triplets_to_cond, ControlTraining, OptimizerConfig, TrainOptions, TrainReport};
