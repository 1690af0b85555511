//! U-Net assembly for the spatial-frequency model and its baselines.

mod config;
mod model;

pub use config::{Layout, ModelConfig, Variant, IMAGE_CHANNELS};
pub use model::{group_counts, InputBlock, Model, OutputBlock, Stage, UNet};
