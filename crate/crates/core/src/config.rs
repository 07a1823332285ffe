use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Output channels of the convolutional stem.
pub const STEM_CHANNELS: usize = 64;
/// Hidden channels between the two stem convolutions.
pub const STEM_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    None,
    Learnable,
    Sine2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    None,
    ConvStem,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("feature map {h}x{w} is not divisible into {patch_h}x{patch_w} patches")]
    NonDivisiblePatch {
        h: usize,
        w: usize,
        patch_h: usize,
        patch_w: usize,
    },
    #[error("input {h}x{w} must be divisible by 4 for the conv stem")]
    NonDivisibleStem { h: usize, w: usize },
    #[error("embed_dim {d} is not divisible by num_heads {h}")]
    IndivisibleHeads { d: usize, h: usize },
    #[error("sine2d position embedding needs embed_dim divisible by 4, got {0}")]
    SineDim(usize),
    #[error("fusion layers {layers:?} must be distinct, ascending and <= {num_layers}")]
    InvalidFusion {
        layers: Vec<usize>,
        num_layers: usize,
    },
    #[error("{0} must be positive")]
    Zero(&'static str),
    #[error("mlp_ratio must be positive and finite, got {0}")]
    MlpRatio(f64),
}

/// Every architectural knob of the model. Serializes to JSON with exactly
/// these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_keypoints: usize,
    pub heatmap_h: usize,
    pub heatmap_w: usize,
    pub mlp_ratio: f64,
    pub pe_mode: PeMode,
    #[serde(default)]
    pub fusion_layers: Option<Vec<usize>>,
    pub stem: StemKind,
}

impl ModelConfig {
    /// Pure-transformer tiny variant: 256x192 input, 16x12 patches, d=192,
    /// 12 layers, 16 heads, 17 keypoints, 64x48 heatmaps.
    pub fn tokenpose_t() -> Self {
        Self {
            input_h: 256,
            input_w: 192,
            channels: 3,
            patch_h: 16,
            patch_w: 12,
            embed_dim: 192,
            num_layers: 12,
            num_heads: 16,
            num_keypoints: 17,
            heatmap_h: 64,
            heatmap_w: 48,
            mlp_ratio: 4.0,
            pe_mode: PeMode::Sine2d,
            fusion_layers: None,
            stem: StemKind::None,
        }
    }

    /// Hybrid small variant: conv stem to 1/4 resolution, then 4x3 patches.
    pub fn tokenpose_s_v1() -> Self {
        Self {
            patch_h: 4,
            patch_w: 3,
            num_heads: 8,
            stem: StemKind::ConvStem,
            ..Self::tokenpose_t()
        }
    }

    /// Desk-scale model used for the synthetic experiments: 64x64 input,
    /// 8x8 patches, d=64, 4 layers, 4 heads, 8 joints, 16x16 heatmaps.
    pub fn toy() -> Self {
        Self {
            input_h: 64,
            input_w: 64,
            channels: 3,
            patch_h: 8,
            patch_w: 8,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            num_keypoints: 8,
            heatmap_h: 16,
            heatmap_w: 16,
            mlp_ratio: 4.0,
            pe_mode: PeMode::Sine2d,
            fusion_layers: None,
            stem: StemKind::None,
        }
    }

    /// Spatial size and channel count of the map that gets patchified.
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        match self.stem {
            StemKind::None => (self.channels, self.input_h, self.input_w),
            StemKind::ConvStem => (STEM_CHANNELS, self.input_h / 4, self.input_w / 4),
        }
    }

    /// Patch grid (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.feature_dims();
        (h / self.patch_h, w / self.patch_w)
    }

    /// Number of visual tokens L.
    pub fn num_visual(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Length of one flattened patch.
    pub fn patch_len(&self) -> usize {
        let (c, _, _) = self.feature_dims();
        self.patch_h * self.patch_w * c
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Encoder layers whose keypoint rows feed the head (1-based; `[M]` when
    /// fusion is off).
    pub fn head_layers(&self) -> Vec<usize> {
        self.fusion_layers
            .clone()
            .unwrap_or_else(|| vec![self.num_layers])
    }

    pub fn head_width(&self) -> usize {
        self.head_layers().len() * self.embed_dim
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("input_h", self.input_h),
            ("input_w", self.input_w),
            ("channels", self.channels),
            ("patch_h", self.patch_h),
            ("patch_w", self.patch_w),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_keypoints", self.num_keypoints),
            ("heatmap_h", self.heatmap_h),
            ("heatmap_w", self.heatmap_w),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(ConfigError::MlpRatio(self.mlp_ratio));
        }
        if self.stem == StemKind::ConvStem && (self.input_h % 4 != 0 || self.input_w % 4 != 0) {
            return Err(ConfigError::NonDivisibleStem {
                h: self.input_h,
                w: self.input_w,
            });
        }
        let (_, h, w) = self.feature_dims();
        if h % self.patch_h != 0 || w % self.patch_w != 0 {
            return Err(ConfigError::NonDivisiblePatch {
                h,
                w,
                patch_h: self.patch_h,
                patch_w: self.patch_w,
            });
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(ConfigError::IndivisibleHeads {
                d: self.embed_dim,
                h: self.num_heads,
            });
        }
        if self.pe_mode == PeMode::Sine2d && self.embed_dim % 4 != 0 {
            return Err(ConfigError::SineDim(self.embed_dim));
        }
        if let Some(layers) = &self.fusion_layers {
            let ok = !layers.is_empty()
                && layers.windows(2).all(|w| w[0] < w[1])
                && layers.iter().all(|&l| l <= self.num_layers);
            if !ok {
                return Err(ConfigError::InvalidFusion {
                    layers: layers.clone(),
                    num_layers: self.num_layers,
                });
            }
        }
        Ok(())
    }
}
