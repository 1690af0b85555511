use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttnMode, ConvKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wavelet::{self, SUBBANDS};

/// Colour channels of every image handled by the models.
pub const IMAGE_CHANNELS: usize = 3;

/// Architecture family, covering the full model and its baselines/ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Spatial-frequency convolutions with spatial and frequency attention.
    Sfunet,
    /// Per-subband 2D convolutions with spatial attention only.
    SpatialOnly,
    /// `SpatialOnly` with the convolutions swapped for spatial-frequency ones.
    SpatialPlusFreqconv,
    /// `SpatialOnly` plus frequency attention.
    SpatialPlusFreqattn,
    /// Full 3D convolutions and attention over all of `F x H x W`.
    Full3d,
    /// Standard 2D U-Net on subbands concatenated along channels.
    Concat2d,
    /// Standard 2D U-Net in pixel space.
    Pixel2d,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Sfunet,
        Variant::SpatialOnly,
        Variant::SpatialPlusFreqconv,
        Variant::SpatialPlusFreqattn,
        Variant::Full3d,
        Variant::Concat2d,
        Variant::Pixel2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sfunet => "sfunet",
            Variant::SpatialOnly => "spatial_only",
            Variant::SpatialPlusFreqconv => "spatial_plus_freqconv",
            Variant::SpatialPlusFreqattn => "spatial_plus_freqattn",
            Variant::Full3d => "full3d",
            Variant::Concat2d => "concat2d",
            Variant::Pixel2d => "pixel2d",
        }
    }

    pub fn conv_kind(self) -> ConvKind {
        match self {
            Variant::Sfunet | Variant::SpatialPlusFreqconv => ConvKind::SpatFreq,
            Variant::Full3d => ConvKind::Full3d,
            Variant::SpatialOnly | Variant::SpatialPlusFreqattn | Variant::Concat2d | Variant::Pixel2d => {
                ConvKind::Spatial
            }
        }
    }

    /// Attention blocks placed (in order) wherever attention is enabled.
    pub fn attn_modes(self) -> &'static [AttnMode] {
        match self {
            Variant::Sfunet | Variant::SpatialPlusFreqattn => &[AttnMode::Spatial, AttnMode::Frequency],
            Variant::Full3d => &[AttnMode::All],
            Variant::SpatialOnly | Variant::SpatialPlusFreqconv | Variant::Concat2d | Variant::Pixel2d => {
                &[AttnMode::Spatial]
            }
        }
    }

    pub fn layout(self) -> Layout {
        match self {
            Variant::Concat2d => Layout::Concat,
            Variant::Pixel2d => Layout::Pixel,
            _ => Layout::Wavelet,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s}")))
    }
}

/// The tensor space a model denoises in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `[B, 3, 4, H/2, W/2]` subband stacks.
    Wavelet,
    /// `[B, 12, H/2, W/2]` subbands concatenated along channels.
    Concat,
    /// `[B, 3, H, W]` pixels.
    Pixel,
}

impl Layout {
    /// Channels seen by the network (after folding 4D inputs to `F = 1`).
    pub fn channels(self) -> usize {
        match self {
            Layout::Wavelet | Layout::Pixel => IMAGE_CHANNELS,
            Layout::Concat => IMAGE_CHANNELS * SUBBANDS,
        }
    }

    /// Side of the network's input feature map for a square image.
    pub fn feature_size(self, image_size: usize) -> usize {
        match self {
            Layout::Wavelet | Layout::Concat => image_size / 2,
            Layout::Pixel => image_size,
        }
    }

    /// Shape of a batch in this layout for `[batch, 3, size, size]` images.
    pub fn shape(self, batch: usize, image_size: usize) -> Vec<usize> {
        let s = self.feature_size(image_size);
        match self {
            Layout::Wavelet => vec![batch, IMAGE_CHANNELS, SUBBANDS, s, s],
            Layout::Concat => vec![batch, IMAGE_CHANNELS * SUBBANDS, s, s],
            Layout::Pixel => vec![batch, IMAGE_CHANNELS, s, s],
        }
    }

    /// Converts `[B, 3, H, W]` images into this layout.
    pub fn encode<T: Scalar>(self, images: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layout::Wavelet => wavelet::dwt(images),
            Layout::Concat => wavelet::dwt_concat(images),
            Layout::Pixel => {
                check_images(images)?;
                Ok(images.clone())
            }
        }
    }

    /// Inverse of [`Layout::encode`].
    pub fn decode<T: Scalar>(self, coeffs: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layout::Wavelet => wavelet::iwt(coeffs),
            Layout::Concat => wavelet::iwt_concat(coeffs),
            Layout::Pixel => {
                check_images(coeffs)?;
                Ok(coeffs.clone())
            }
        }
    }
}

fn check_images<T: Scalar>(x: &Tensor<T>) -> Result<()> {
    if x.rank() != 4 || x.shape()[1] != IMAGE_CHANNELS {
        return Err(Error::invalid("pixel layout", format!("expected [B, 3, H, W], got {:?}", x.shape())));
    }
    Ok(())
}

fn default_heads() -> usize {
    1
}

fn default_dropout() -> f64 {
    0.1
}

/// Declarative description of a U-Net.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Side length of the (square) pixel-space images.
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub num_res_blocks: usize,
    /// Feature-map sides (in the network's own input space) that get attention.
    #[serde(default)]
    pub attention_resolutions: BTreeSet<usize>,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

impl ModelConfig {
    /// 32x32 images: four stages `[c, 2c, 2c, 2c]`, three blocks, four heads
    /// at 16 and 8.
    pub fn cifar(variant: Variant) -> Self {
        Self {
            variant,
            image_size: 32,
            base_channels: 128,
            channel_mult: vec![1, 2, 2, 2],
            num_res_blocks: 3,
            attention_resolutions: [16, 8].into(),
            num_heads: 4,
            dropout: 0.1,
        }
    }

    /// 256x256 images: six stages `[c, c, 2c, 2c, 4c, 4c]`, two blocks, one
    /// head at 16.
    pub fn res256(variant: Variant, base_channels: usize) -> Self {
        Self {
            variant,
            image_size: 256,
            base_channels,
            channel_mult: vec![1, 1, 2, 2, 4, 4],
            num_res_blocks: 2,
            attention_resolutions: [16].into(),
            num_heads: 1,
            dropout: 0.1,
        }
    }

    /// Desk-scale model for 16x16 images.
    pub fn toy(variant: Variant) -> Self {
        let layout = variant.layout();
        Self {
            variant,
            image_size: 16,
            base_channels: 16,
            channel_mult: vec![1, 2],
            num_res_blocks: 1,
            attention_resolutions: [layout.feature_size(16) / 2].into(),
            num_heads: 1,
            dropout: 0.1,
        }
    }

    pub fn layout(&self) -> Layout {
        self.variant.layout()
    }

    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    /// Feature-map side at each level.
    pub fn resolutions(&self) -> Vec<usize> {
        let top = self.layout().feature_size(self.image_size);
        (0..self.levels()).map(|l| top >> l).collect()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    pub fn attends_at(&self, level: usize) -> bool {
        self.attention_resolutions.contains(&self.resolutions()[level])
    }

    pub fn emb_dim(&self) -> usize {
        4 * self.base_channels
    }

    /// Shape of a model input batch.
    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        self.layout().shape(batch, self.image_size)
    }

    /// Checks every invariant, reporting all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.base_channels == 0 {
            errs.push("base_channels must be positive".to_string());
        } else if self.base_channels % 2 != 0 {
            errs.push(format!("base_channels {} must be even (timestep encoding)", self.base_channels));
        }
        if self.channel_mult.is_empty() {
            errs.push("channel_mult must list at least one stage".to_string());
        }
        if self.channel_mult.contains(&0) {
            errs.push(format!("channel_mult {:?} has a zero entry", self.channel_mult));
        }
        if self.num_res_blocks == 0 {
            errs.push("num_res_blocks must be positive".to_string());
        }
        if self.num_heads == 0 {
            errs.push("num_heads must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.image_size == 0 || self.image_size % 2 != 0 {
            errs.push(format!("image_size {} must be positive and even", self.image_size));
        }
        let shaped = !self.channel_mult.is_empty()
            && self.base_channels > 0
            && self.num_heads > 0
            && self.image_size > 0
            && self.image_size % 2 == 0;
        if shaped {
            let top = self.layout().feature_size(self.image_size);
            let factor = 1usize << (self.levels() - 1);
            if top % factor != 0 {
                errs.push(format!(
                    "feature size {top} not divisible by {factor} for {} stages",
                    self.levels()
                ));
            }
            let res = self.resolutions();
            for r in &self.attention_resolutions {
                if !res.contains(r) {
                    errs.push(format!("attention resolution {r} not among stage resolutions {res:?}"));
                }
            }
            for level in 0..self.levels() {
                if self.attends_at(level) || level + 1 == self.levels() {
                    let ch = self.level_channels(level);
                    if ch % self.num_heads != 0 {
                        errs.push(format!("{ch} channels at stage {level} not divisible by {} heads", self.num_heads));
                    }
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for v in Variant::ALL {
            ModelConfig::cifar(v).validate().unwrap();
            ModelConfig::res256(v, 128).validate().unwrap();
            ModelConfig::toy(v).validate().unwrap();
        }
        assert_eq!(ModelConfig::cifar(Variant::Sfunet).resolutions(), [16, 8, 4, 2]);
        assert_eq!(ModelConfig::cifar(Variant::Pixel2d).resolutions(), [32, 16, 8, 4]);
        assert_eq!(ModelConfig::res256(Variant::Sfunet, 64).resolutions(), [128, 64, 32, 16, 8, 4]);
    }

    #[test]
    fn violations_are_all_listed() {
        let mut c = ModelConfig::toy(Variant::Sfunet);
        c.num_res_blocks = 0;
        c.dropout = 1.5;
        c.attention_resolutions.insert(3);
        match c.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn heads_must_divide_attended_channels() {
        let mut c = ModelConfig::toy(Variant::Sfunet);
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
    }

    #[test]
    fn config_json_is_strict() {
        let c = ModelConfig::toy(Variant::Full3d);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), c);
        let bad = json.replace("\"dropout\"", "\"drop_out\"");
        assert!(serde_json::from_str::<ModelConfig>(&bad).is_err());
    }

    #[test]
    fn layouts_round_trip_images() {
        let mut rng = rand::rng();
        let x = Tensor::<f64>::randn(&[2, 3, 8, 8], &mut rng);
        for layout in [Layout::Wavelet, Layout::Concat, Layout::Pixel] {
            let u = layout.encode(&x).unwrap();
            assert_eq!(u.shape(), layout.shape(2, 8));
            assert!(layout.decode(&u).unwrap().max_abs_diff(&x) < 1e-12);
        }
    }
}
