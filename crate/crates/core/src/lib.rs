//! Keypoint-token transformer for top-down 2D human pose estimation.
//!
//! Image patches become visual tokens, each keypoint type owns a learnable
//! token, and a pre-LN transformer encoder mixes both; the final keypoint
//! tokens are projected to heatmaps. Everything sits on a small dense tensor
//! library with reverse-mode differentiation ([`tensor`]).

extern crate self as tokenpose;

pub mod config;
pub mod data;
pub mod encoder;
pub mod export;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod par;
pub mod params;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use config::{ModelConfig, PeMode, StemKind};
pub use params::{ParamId, ParamStore};
pub use tensor::{Graph, Scalar, Tensor, TensorError};
