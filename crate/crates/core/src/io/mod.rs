//! Configuration, reference ingestion, images and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod images;
pub mod reference;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ConditionInput, ConditionKind, RunConfig, ENV_PREFIX};
pub use reference::{load_conditions, load_reference};
