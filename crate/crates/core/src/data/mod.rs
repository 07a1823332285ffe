//! Samples, skeleton templates, synthetic rendering, annotation files and
//! top-down crops.

pub mod coco;
pub mod crop;
pub mod image;
pub mod skeleton;
pub mod synth;

use std::borrow::Cow;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use coco::{load_annotations, write_annotations};
pub use crop::{crop_to_input, flip_horizontal, CropTransform, PreparedSample};
pub use image::Image;
pub use skeleton::SkeletonTemplate;
pub use synth::{generate_synthetic, SynthConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("schema error at {path}: {message}")]
    SchemaError { path: String, message: String },
    #[error("invalid template: {0}")]
    TemplateInvalid(String),
    #[error("degenerate box {0:?}")]
    DegenerateBox([f64; 4]),
    #[error("image error: {0}")]
    Image(String),
    #[error("io error on {0}: {1}")]
    Io(String, String),
    #[error("{0}")]
    Invalid(String),
}

/// One annotated keypoint in image pixels; `v > 0` means labeled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: f64,
}

impl Keypoint {
    pub fn labeled(&self) -> bool {
        self.v > 0.0
    }
}

/// Pixel data, either in memory or a file to be read on first use.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Loaded(Image),
    Lazy(PathBuf),
}

/// A single-person sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSample {
    pub id: String,
    pub image: ImageSource,
    pub keypoints: Vec<Keypoint>,
    /// `[x, y, w, h]`; covers the pixel cells `x..x+w`, `y..y+h`.
    pub bbox: [f64; 4],
    /// Object scale `s = √(bbox area)`.
    pub scale: f64,
    pub head_size: Option<f64>,
}

impl PoseSample {
    pub fn image(&self) -> Result<Cow<'_, Image>, DataError> {
        match &self.image {
            ImageSource::Loaded(img) => Ok(Cow::Borrowed(img)),
            ImageSource::Lazy(path) => image::read_pnm(path).map(Cow::Owned),
        }
    }

    /// Replace a lazy image by its pixels.
    pub fn load(&mut self) -> Result<(), DataError> {
        if let ImageSource::Lazy(path) = &self.image {
            self.image = ImageSource::Loaded(image::read_pnm(path)?);
        }
        Ok(())
    }
}
