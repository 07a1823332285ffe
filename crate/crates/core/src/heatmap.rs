//! Keypoint-token to heatmap head, Gaussian targets, masked MSE loss and
//! coordinate decoding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{image, DataError};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Default Gaussian target spread, in heatmap pixels.
pub const DEFAULT_SIGMA: f64 = 2.0;
/// Lower clamp applied before taking the log of a heatmap.
pub const LOG_FLOOR: f64 = 1e-10;

/// `N` heatmaps of size `height x width`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapSet {
    pub maps: Vec<f64>,
    pub num: usize,
    pub height: usize,
    pub width: usize,
}

impl HeatmapSet {
    pub fn zeros(num: usize, height: usize, width: usize) -> Self {
        Self {
            maps: vec![0.0; num * height * width],
            num,
            height,
            width,
        }
    }

    pub fn map(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.maps[k * n..(k + 1) * n]
    }

    pub fn map_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.maps[k * n..(k + 1) * n]
    }

    /// Split a `[B, N, H, W]` (or `[N, H, W]`) tensor into one set per sample.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<HeatmapSet> {
        let s = t.shape();
        let r = s.len();
        let (num, height, width) = (s[r - 3], s[r - 2], s[r - 1]);
        let per = num * height * width;
        t.data()
            .chunks(per)
            .map(|c| HeatmapSet {
                maps: c.iter().map(|v| v.as_f64()).collect(),
                num,
                height,
                width,
            })
            .collect()
    }

    /// Raw planes: a text line `"H W N\n"` followed by little-endian `f32`
    /// values, map after map, row-major.
    pub fn to_raw(&self) -> Vec<u8> {
        let mut out = format!("{} {} {}\n", self.height, self.width, self.num).into_bytes();
        for &v in &self.maps {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_raw(bytes: &[u8]) -> Option<Self> {
        let nl = bytes.iter().position(|&b| b == b'\n')?;
        let header = std::str::from_utf8(&bytes[..nl]).ok()?;
        let dims: Vec<usize> = header.split_whitespace().map(|t| t.parse().ok()).collect::<Option<_>>()?;
        let [height, width, num] = dims[..] else { return None };
        let body = &bytes[nl + 1..];
        if body.len() != 4 * num * height * width {
            return None;
        }
        let maps = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Some(Self { maps, num, height, width })
    }

    /// One 16-bit PGM per map (`<stem>_<k>.pgm`), min-max normalized per map.
    pub fn write_pgm(&self, dir: &Path, stem: &str) -> std::result::Result<(), DataError> {
        for k in 0..self.num {
            let path = dir.join(format!("{stem}_{k}.pgm"));
            image::write_pgm16(&path, self.map(k), self.width, self.height, &[])?;
        }
        Ok(())
    }
}

/// Linear projection of each (possibly fused) keypoint token to `H·W` values,
/// reshaped row-major: `[.., N, width] -> [.., N, H, W]`.
pub fn head_forward<T: Scalar>(
    tokens: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    if weight.shape().get(1) != Some(&(height * width)) {
        return Err(TensorError::ShapeMismatch {
            op: "head_forward",
            lhs: weight.shape().to_vec(),
            rhs: vec![height, width],
        });
    }
    let mut y = tokens.matmul(weight)?;
    if let Some(b) = bias {
        y = y.add(b)?;
    }
    let mut shape = y.shape()[..y.rank() - 1].to_vec();
    shape.extend_from_slice(&[height, width]);
    y.reshape(&shape)
}

/// `exp(-‖p - center‖² / 2σ²)` over a `height x width` grid; `center` is
/// `(x, y)` in heatmap pixels.
pub fn gaussian_target(center: (f64, f64), sigma: f64, height: usize, width: usize) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let dy = y as f64 - center.1;
        for x in 0..width {
            let dx = x as f64 - center.0;
            out.push((-(dx * dx + dy * dy) * inv).exp());
        }
    }
    out
}

/// Ground-truth maps and loss weights for one sample. `keypoints` are
/// `(x, y, v)` in heatmap pixels. A keypoint contributes to the loss iff
/// `v > 0` and its center lies inside the map.
pub fn targets_for(keypoints: &[(f64, f64, f64)], sigma: f64, height: usize, width: usize) -> (HeatmapSet, Vec<bool>) {
    let mut set = HeatmapSet::zeros(keypoints.len(), height, width);
    let mut weights = Vec::with_capacity(keypoints.len());
    for (k, &(x, y, v)) in keypoints.iter().enumerate() {
        let inside = x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64;
        let on = v > 0.0 && inside;
        if on {
            set.map_mut(k).copy_from_slice(&gaussian_target((x, y), sigma, height, width));
        }
        weights.push(on);
    }
    (set, weights)
}

/// Mean over labeled keypoints of the per-map mean squared error. `pred` and
/// `target` are `[.., N, H, W]`; `weights` has one flag per map. Unlabeled
/// maps neither contribute nor count. With no labeled map the loss is zero
/// (and a warning is logged).
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, weights: &[bool]) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mse_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let r = pred.rank();
    let plane = pred.shape()[r - 2] * pred.shape()[r - 1];
    if weights.len() * plane != pred.numel() {
        return Err(TensorError::ShapeMismatch {
            op: "mse_loss",
            lhs: pred.shape().to_vec(),
            rhs: vec![weights.len()],
        });
    }
    let visible = weights.iter().filter(|&&w| w).count();
    if visible == 0 {
        log::warn!("mse_loss: no labeled keypoints in batch, loss is zero");
        return Ok(pred.sum().scale(T::zero()));
    }
    let mask: Vec<T> = weights
        .iter()
        .flat_map(|&w| std::iter::repeat_n(if w { T::one() } else { T::zero() }, plane))
        .collect();
    let mask = Tensor::new(mask, pred.shape())?;
    let sq = pred.sub(target)?.square().mul(&mask)?;
    Ok(sq.sum().scale(T::one() / T::from_f64((visible * plane) as f64)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Argmax,
    #[default]
    Subpixel,
}

/// Decoded keypoints in input-image pixels with their peak heatmap values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedPose {
    pub coords: Vec<(f64, f64)>,
    pub scores: Vec<f64>,
}

impl DecodedPose {
    pub fn mean_score(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len().max(1) as f64
    }
}

/// Integer peak of one map; ties go to the lowest row-major index.
pub fn argmax(map: &[f64], width: usize) -> (usize, usize, f64) {
    let mut best = 0;
    for (i, &v) in map.iter().enumerate() {
        if v > map[best] {
            best = i;
        }
    }
    (best % width, best / width, map[best])
}

/// Peak location of one map in heatmap pixels.
pub fn decode_map(map: &[f64], height: usize, width: usize, mode: DecodeMode) -> (f64, f64, f64) {
    let (px, py, peak) = argmax(map, width);
    let fallback = (px as f64, py as f64, peak);
    if mode == DecodeMode::Argmax || px < 1 || py < 1 || px + 2 > width || py + 2 > height {
        return fallback;
    }
    let l = |x: usize, y: usize| map[y * width + x].max(LOG_FLOOR).ln();
    let c = l(px, py);
    let dx = 0.5 * (l(px + 1, py) - l(px - 1, py));
    let dy = 0.5 * (l(px, py + 1) - l(px, py - 1));
    let dxx = l(px + 1, py) - 2.0 * c + l(px - 1, py);
    let dyy = l(px, py + 1) - 2.0 * c + l(px, py - 1);
    let dxy = 0.25 * (l(px + 1, py + 1) - l(px - 1, py + 1) - l(px + 1, py - 1) + l(px - 1, py - 1));
    let det = dxx * dyy - dxy * dxy;
    if !det.is_finite() || det.abs() < 1e-12 {
        return fallback;
    }
    let ox = -(dyy * dx - dxy * dy) / det;
    let oy = -(dxx * dy - dxy * dx) / det;
    // a step leaving the peak cell means the local quadratic model is not a maximum
    if !(ox.abs() <= 1.0 && oy.abs() <= 1.0) {
        return fallback;
    }
    (px as f64 + ox, py as f64 + oy, peak)
}

/// Decode every map and scale to input pixels by `(input_w / W, input_h / H)`,
/// clamping to the image.
pub fn decode(pred: &HeatmapSet, mode: DecodeMode, input_h: usize, input_w: usize) -> DecodedPose {
    let sx = input_w as f64 / pred.width as f64;
    let sy = input_h as f64 / pred.height as f64;
    let mut coords = Vec::with_capacity(pred.num);
    let mut scores = Vec::with_capacity(pred.num);
    for k in 0..pred.num {
        let (x, y, s) = decode_map(pred.map(k), pred.height, pred.width, mode);
        coords.push((
            (x * sx).clamp(0.0, (input_w - 1) as f64),
            (y * sy).clamp(0.0, (input_h - 1) as f64),
        ));
        scores.push(s);
    }
    DecodedPose { coords, scores }
}
