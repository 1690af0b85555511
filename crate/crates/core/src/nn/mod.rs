//! Building blocks of the spatial-frequency U-Net.

pub mod attention;
pub mod conv;
pub mod embedding;
pub mod layers;
pub mod params;
pub mod resample;
pub mod resblock;

pub use attention::{AttentionBlock, AttnMode};
pub use conv::{midplanes, ConvKind, ConvStage};
pub use embedding::{timestep_embedding, TimeEmbed};
pub use layers::{Conv, GroupNorm, Init, Linear, Pointwise};
pub use params::{Builder, Forward, ParamId, ParamSpec, ParamStore};
pub use resample::{Downsample, Upsample};
pub use resblock::ResBlock;
