//! Frozen feature providers.
//!
//! A provider maps an RGB image to a [`FeatureBundle`]: shallow features,
//! the encoder's image embedding, one decoder embedding per prompt point of
//! a regular `grid_side × grid_side` grid, and the object masks the decoder
//! emits for those prompts. Providers expose no trainable state.

mod guidance;
mod toy;

pub use guidance::{masks_to_guidance, sobel_edges, MaskGuidance};
pub use toy::ToyBackbone;

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{cfg_err, dim_err};
use crate::{Image, Mask, Result, Tensor};

/// Smallest accepted image side.
pub const MIN_IMAGE_SIDE: usize = 16;

/// Default prompt grid side (8 × 8 points).
pub const DEFAULT_GRID_SIDE: usize = 8;

/// Outputs of a frozen provider for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// `[C_s, D, D]` output of the first encoder block.
    pub shallow_features: Tensor,
    /// `[C_i, D, D]` encoder output.
    pub image_embedding: Tensor,
    /// `[P, C_m, d_m, d_m]`, one decoder embedding per prompt point.
    pub mask_embeddings: Tensor,
    /// One binary `H × W` mask per prompt point.
    pub object_masks: Vec<Mask>,
    /// `(H, W)` of the source image.
    pub source_size: (usize, usize),
    /// Side, in source pixels, of the square frame the `D × D` grid covers.
    /// The frame is anchored at the image's top-left corner.
    pub frame_side: usize,
}

impl FeatureBundle {
    /// Feature grid side `D`.
    pub fn grid(&self) -> usize {
        self.image_embedding.spatial().0
    }

    pub fn prompts(&self) -> usize {
        self.mask_embeddings.shape().first().copied().unwrap_or(0)
    }

    /// Check shapes and finiteness.
    pub fn validate(&self) -> Result<()> {
        let (cs, ds, ds2) = self.shallow_features.dims3()?;
        let (ci, di, di2) = self.image_embedding.dims3()?;
        let [p, cm, dm, dm2] = *self.mask_embeddings.shape() else {
            return Err(dim_err!("mask embeddings must be [P, C, d, d], got {:?}", self.mask_embeddings.shape()));
        };
        if ds != ds2 || di != di2 || dm != dm2 || ds != di {
            return Err(dim_err!("feature grids must be square and equal: {ds}x{ds2}, {di}x{di2}, {dm}x{dm2}"));
        }
        if [cs, ci, cm, p, ds, dm].contains(&0) {
            return Err(dim_err!("feature dimensions must be positive"));
        }
        if self.object_masks.len() != p {
            return Err(dim_err!("{} object masks for {p} prompts", self.object_masks.len()));
        }
        if self.object_masks.iter().any(|m| m.size() != self.source_size) {
            return Err(dim_err!("object masks must match the source size {:?}", self.source_size));
        }
        if self.frame_side < self.source_size.0.max(self.source_size.1) {
            return Err(dim_err!("frame side {} does not cover {:?}", self.frame_side, self.source_size));
        }
        if !(self.shallow_features.is_finite() && self.image_embedding.is_finite() && self.mask_embeddings.is_finite()) {
            return Err(crate::Error::NonFinite(String::from("feature bundle")));
        }
        Ok(())
    }
}

/// Which provider implementation to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ProviderKind {
    /// Features exported from a pretrained segmentation foundation model.
    PretrainedAdapter,
    /// Deterministic filter-bank provider for tests and CI.
    Toy,
}

impl ProviderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProviderKind::PretrainedAdapter => "pretrained_adapter",
            ProviderKind::Toy => "toy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrained_adapter" | "pretrained" => Ok(ProviderKind::PretrainedAdapter),
            "toy" => Ok(ProviderKind::Toy),
            other => Err(cfg_err!("unknown provider kind `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Prompt grid side; the provider emits `grid_side²` masks.
    pub grid_side: usize,
    /// Opaque location of the pretrained weights or feature export.
    pub checkpoint_path: Option<String>,
    /// Seed of the toy provider's channel mixing.
    pub seed: Option<u64>,
    /// Toy provider: source pixels per feature cell (power of two).
    pub toy_stride: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self { kind: ProviderKind::Toy, grid_side: DEFAULT_GRID_SIDE, checkpoint_path: None, seed: Some(0), toy_stride: 4 }
    }
}

impl ProviderConfig {
    pub fn toy(seed: u64) -> Self {
        Self { seed: Some(seed), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_side == 0 {
            return Err(cfg_err!("grid_side must be at least 1"));
        }
        match self.kind {
            ProviderKind::Toy => {
                if self.seed.is_none() {
                    return Err(cfg_err!("the toy provider requires a seed"));
                }
                if !self.toy_stride.is_power_of_two() {
                    return Err(cfg_err!("toy stride {} is not a power of two", self.toy_stride));
                }
            }
            ProviderKind::PretrainedAdapter => {
                if self.checkpoint_path.is_none() {
                    return Err(crate::Error::Load(String::from("pretrained adapter needs a checkpoint path")));
                }
            }
        }
        Ok(())
    }
}

/// A frozen image-to-features function.
///
/// Implementations must be reentrant: `extract` takes `&self` and may be
/// called from several threads at once.
pub trait FeatureProvider: Send + Sync {
    fn kind(&self) -> ProviderKind;

    fn grid_side(&self) -> usize;

    fn extract(&self, image: &Image) -> Result<FeatureBundle>;

    /// Number of frozen scalars inside the provider.
    fn frozen_parameter_count(&self) -> usize;

    /// Digest of the provider's internal state; constant over its lifetime.
    fn state_digest(&self) -> u64;
}

pub(crate) fn check_image(image: &Image) -> Result<()> {
    let (h, w) = image.size();
    if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
        return Err(dim_err!("image {h}x{w} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"));
    }
    Ok(())
}
