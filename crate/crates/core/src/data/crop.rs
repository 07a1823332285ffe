//! Top-down crops: box to network input and back.
//!
//! Coordinates put pixel `i`'s center at `i`. A box `[x, y, w, h]` covers the
//! pixel cells `x..x+w`, i.e. the continuous span `[x - 0.5, x + w - 0.5]`.

use super::{DataError, Image, Keypoint, PoseSample, SkeletonTemplate};

/// Affine map between original-image and input-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform {
    pub x0: f64,
    pub y0: f64,
    /// Original pixels per input pixel.
    pub sx: f64,
    pub sy: f64,
}

impl CropTransform {
    pub fn to_input(&self, x: f64, y: f64) -> (f64, f64) {
        ((x + 0.5 - self.x0) / self.sx - 0.5, (y + 0.5 - self.y0) / self.sy - 0.5)
    }

    pub fn to_original(&self, u: f64, v: f64) -> (f64, f64) {
        (self.x0 + (u + 0.5) * self.sx - 0.5, self.y0 + (v + 0.5) * self.sy - 0.5)
    }

    /// Geometric-mean scale, used for lengths.
    pub fn length_scale(&self) -> f64 {
        (self.sx * self.sy).abs().sqrt()
    }
}

/// A sample resampled to the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub image: Image,
    /// Keypoints in input pixels.
    pub keypoints: Vec<Keypoint>,
    pub transform: CropTransform,
    /// Head size in input pixels.
    pub head_size: Option<f64>,
}

/// Bilinear sample at `(x, y)`; zero outside the image.
pub fn bilinear(img: &Image, c: usize, x: f64, y: f64) -> f32 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ax, ay) = ((x - fx) as f32, (y - fy) as f32);
    let at = |xi: f64, yi: f64| -> f32 {
        if xi < 0.0 || yi < 0.0 || xi >= img.width as f64 || yi >= img.height as f64 {
            0.0
        } else {
            img.get(c, yi as usize, xi as usize)
        }
    };
    let top = at(fx, fy) * (1.0 - ax) + if ax > 0.0 { at(fx + 1.0, fy) * ax } else { 0.0 };
    if ay == 0.0 {
        return top;
    }
    let bottom = at(fx, fy + 1.0) * (1.0 - ax) + if ax > 0.0 { at(fx + 1.0, fy + 1.0) * ax } else { 0.0 };
    top * (1.0 - ay) + bottom * ay
}

/// Grow the box about its center to the input aspect ratio, then resample it
/// to `input_h x input_w`.
pub fn crop_to_input(sample: &PoseSample, input_h: usize, input_w: usize) -> Result<PreparedSample, DataError> {
    let [x, y, w, h] = sample.bbox;
    if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
        return Err(DataError::DegenerateBox(sample.bbox));
    }
    let aspect = input_w as f64 / input_h as f64;
    let (mut bw, mut bh) = (w, h);
    if bw / bh < aspect {
        bw = bh * aspect;
    } else {
        bh = bw / aspect;
    }
    let (cx, cy) = (x + w / 2.0, y + h / 2.0);
    let t = CropTransform {
        x0: cx - bw / 2.0,
        y0: cy - bh / 2.0,
        sx: bw / input_w as f64,
        sy: bh / input_h as f64,
    };
    let src = sample.image()?;
    let mut out = Image::new(src.channels, input_h, input_w);
    for v in 0..input_h {
        for u in 0..input_w {
            let (ox, oy) = t.to_original(u as f64, v as f64);
            for c in 0..src.channels {
                out.set(c, v, u, bilinear(&src, c, ox, oy));
            }
        }
    }
    let keypoints = sample
        .keypoints
        .iter()
        .map(|k| {
            let (u, v) = t.to_input(k.x, k.y);
            Keypoint { x: u, y: v, v: k.v }
        })
        .collect();
    Ok(PreparedSample {
        image: out,
        keypoints,
        transform: t,
        head_size: sample.head_size.map(|g| g / t.length_scale()),
    })
}

/// Mirror a prepared sample left-right and swap symmetric joints.
pub fn flip_horizontal(p: &PreparedSample, template: &SkeletonTemplate) -> PreparedSample {
    let img = &p.image;
    let mut out = Image::new(img.channels, img.height, img.width);
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(c, y, img.width - 1 - x, img.get(c, y, x));
            }
        }
    }
    let w1 = (img.width - 1) as f64;
    let perm = template.flip_permutation();
    let keypoints = perm
        .iter()
        .map(|&src| {
            let k = p.keypoints[src];
            Keypoint { x: w1 - k.x, y: k.y, v: k.v }
        })
        .collect();
    // keep the transform pointing back at the unflipped original
    let t = p.transform;
    let transform = CropTransform { x0: t.x0 + t.sx * img.width as f64, sx: -t.sx, ..t };
    PreparedSample { image: out, keypoints, transform, head_size: p.head_size }
}
