//! Trainable decomposition network with hand-written reverse mode.

pub mod adam;
pub mod checkpoint;
mod layers;
pub mod model;
mod ops;
pub mod params;
mod tensor;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use model::{Mode, Model, ModelConfig, Tape};
pub use params::{ParamId, ParamSpec, ParamStore};
pub use train::{evaluate_model, load_model, LogEntry, SupervisionMode, TrainConfig, TrainData, Trainer};
