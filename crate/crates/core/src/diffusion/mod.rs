//! Noise schedule, conditional U-Net noise predictor, mixture loss, training
//! loop and checkpoints.

pub mod checkpoint;
pub mod model;
pub mod schedule;
pub mod train;
pub mod unet;

pub use checkpoint::Checkpoint;
pub use model::{CatsgModel, Cond, DataShape, ModelConfig};
pub use schedule::{forward_corrupt, make_schedule, DiffusionSchedule, ScheduleKind};
pub use train::{build_model, train, Ablation, TrainConfig};
pub use unet::{UNet, UNetConfig};
