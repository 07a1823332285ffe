//! Procedural stick-figure renderer with exact keypoint labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Image, ImageSource, Keypoint, PoseSample, SkeletonTemplate};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Global rotation drawn from `±rotation_deg`.
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Per-bone angle jitter drawn from `±articulation_deg`.
    pub articulation_deg: f64,
    /// Probability that a sample gets an occluder covering 1..=3 joints.
    pub occlusion_rate: f64,
    /// Amplitude of the uniform background noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 3,
            rotation_deg: 30.0,
            scale_min: 0.7,
            scale_max: 1.3,
            articulation_deg: 15.0,
            occlusion_rate: 0.0,
            noise: 0.08,
        }
    }
}

/// Pose parameters for one figure, in pixels and radians.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams {
    pub rotation: f64,
    /// Pixels per template unit.
    pub scale: f64,
    pub root: (f64, f64),
    /// Extra angle per bone, in bone order; accumulates down the tree.
    pub bone_angles: Vec<f64>,
}

/// Forward kinematics: joint positions for `params`.
pub fn pose_joints(t: &SkeletonTemplate, params: &PoseParams) -> Vec<(f64, f64)> {
    let n = t.num_joints();
    let root = t.root();
    let mut pos = vec![(0.0, 0.0); n];
    let mut angle = vec![0.0; n];
    let mut done = vec![false; n];
    done[root] = true;
    // bones may be listed in any order; sweep until every child is placed
    let mut placed = 1;
    while placed < n {
        let before = placed;
        for (b, bone) in t.bones.iter().enumerate() {
            if done[bone.child] || !done[bone.parent] {
                continue;
            }
            let (pr, cr) = (t.joints[bone.parent].rest, t.joints[bone.child].rest);
            let a = angle[bone.parent] + params.bone_angles.get(b).copied().unwrap_or(0.0);
            let (dx, dy) = (cr.0 - pr.0, cr.1 - pr.1);
            let (s, c) = a.sin_cos();
            pos[bone.child] = (pos[bone.parent].0 + c * dx - s * dy, pos[bone.parent].1 + s * dx + c * dy);
            angle[bone.child] = a;
            done[bone.child] = true;
            placed += 1;
        }
        if placed == before {
            break;
        }
    }
    let (s, c) = params.rotation.sin_cos();
    pos.iter()
        .map(|&(x, y)| {
            let (rx, ry) = (c * x - s * y, s * x + c * y);
            (params.root.0 + params.scale * rx, params.root.1 + params.scale * ry)
        })
        .collect()
}

fn blend(img: &mut Image, x: usize, y: usize, color: [f32; 3], cov: f32) {
    for c in 0..img.channels {
        let target = if img.channels == 3 { color[c] } else { 0.299 * color[0] + 0.587 * color[1] + 0.114 * color[2] };
        let v = img.get(c, y, x);
        img.set(c, y, x, v + (target - v) * cov);
    }
}

fn pixel_window(img: &Image, x0: f64, x1: f64, y0: f64, y1: f64) -> (usize, usize, usize, usize) {
    let clampi = |v: f64, hi: usize| v.max(0.0).min(hi as f64 - 1.0) as usize;
    (clampi(x0.floor(), img.width), clampi(x1.ceil(), img.width), clampi(y0.floor(), img.height), clampi(y1.ceil(), img.height))
}

/// Anti-aliased segment of half-width `hw`.
fn draw_segment(img: &mut Image, a: (f64, f64), b: (f64, f64), hw: f64, color: [f32; 3]) {
    let m = hw + 1.0;
    let (xa, xb, ya, yb) = pixel_window(img, a.0.min(b.0) - m, a.0.max(b.0) + m, a.1.min(b.1) - m, a.1.max(b.1) + m);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in ya..=yb {
        for x in xa..=xb {
            let (px, py) = (x as f64 - a.0, y as f64 - a.1);
            let t = if len2 > 0.0 { ((px * dx + py * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let d = ((px - t * dx).powi(2) + (py - t * dy).powi(2)).sqrt();
            let cov = (hw + 0.5 - d).clamp(0.0, 1.0);
            if cov > 0.0 {
                blend(img, x, y, color, cov as f32);
            }
        }
    }
}

/// Anti-aliased disc; fully opaque wherever the pixel center is within `r - 0.5`.
fn draw_disc(img: &mut Image, c: (f64, f64), r: f64, color: [f32; 3]) {
    let m = r + 1.0;
    let (xa, xb, ya, yb) = pixel_window(img, c.0 - m, c.0 + m, c.1 - m, c.1 + m);
    for y in ya..=yb {
        for x in xa..=xb {
            let d = ((x as f64 - c.0).powi(2) + (y as f64 - c.1).powi(2)).sqrt();
            let cov = (r + 0.5 - d).clamp(0.0, 1.0);
            if cov > 0.0 {
                blend(img, x, y, color, cov as f32);
            }
        }
    }
}

/// Draw the figure (limbs, then joint discs) on top of `img`.
pub fn render_figure(img: &mut Image, t: &SkeletonTemplate, joints: &[(f64, f64)]) {
    for b in &t.bones {
        draw_segment(img, joints[b.parent], joints[b.child], t.limb_half_width, t.limb_color);
    }
    for (j, spec) in t.joints.iter().enumerate() {
        draw_disc(img, joints[j], spec.radius, spec.color);
    }
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer over (seed, index)
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Tight box around all joints, padded by the largest disc radius plus one
/// pixel and clipped to the canvas.
fn joint_box(t: &SkeletonTemplate, joints: &[(f64, f64)], h: usize, w: usize) -> [f64; 4] {
    let m = t.joints.iter().map(|j| j.radius).fold(0.0, f64::max) + 1.0;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in joints {
        x0 = x0.min(x - m);
        y0 = y0.min(y - m);
        x1 = x1.max(x + m);
        y1 = y1.max(y + m);
    }
    let x0 = x0.floor().max(0.0);
    let y0 = y0.floor().max(0.0);
    let x1 = (x1.ceil() + 1.0).min(w as f64);
    let y1 = (y1.ceil() + 1.0).min(h as f64);
    [x0, y0, x1 - x0, y1 - y0]
}

fn one_sample(seed: u64, index: usize, t: &SkeletonTemplate, cfg: &SynthConfig) -> PoseSample {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, index));
    let (h, w) = (cfg.height, cfg.width);
    let unit = h.min(w) as f64;
    let margin = t.joints.iter().map(|j| j.radius).fold(0.0, f64::max) + 1.0;
    let rot = cfg.rotation_deg.to_radians();
    let art = cfg.articulation_deg.to_radians();
    let sym = |rng: &mut ChaCha8Rng, a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };

    let rotation = sym(&mut rng, rot);
    let mut scale = if cfg.scale_max > cfg.scale_min { rng.random_range(cfg.scale_min..=cfg.scale_max) } else { cfg.scale_min };
    let bone_angles: Vec<f64> = (0..t.bones.len()).map(|_| sym(&mut rng, art)).collect();
    let mut params = PoseParams { rotation, scale: scale * unit, root: (0.0, 0.0), bone_angles };
    let joints = loop {
        params.scale = scale * unit;
        let rel = pose_joints(t, &params);
        let (mut lx, mut ly, mut hx, mut hy) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &rel {
            lx = lx.min(x);
            ly = ly.min(y);
            hx = hx.max(x);
            hy = hy.max(y);
        }
        let (ax, bx) = (margin - lx, w as f64 - 1.0 - margin - hx);
        let (ay, by) = (margin - ly, h as f64 - 1.0 - margin - hy);
        if ax <= bx && ay <= by {
            let tx = if bx > ax { rng.random_range(ax..=bx) } else { ax };
            let ty = if by > ay { rng.random_range(ay..=by) } else { ay };
            break rel.iter().map(|&(x, y)| (x + tx, y + ty)).collect::<Vec<_>>();
        }
        // figure does not fit: shrink until it does
        scale *= 0.9;
    };

    let mut img = Image::new(cfg.channels, h, w);
    if cfg.noise > 0.0 {
        for v in img.data.iter_mut() {
            *v = rng.random_range(0.0..cfg.noise as f32);
        }
    }
    render_figure(&mut img, t, &joints);

    let mut vis = vec![2.0; joints.len()];
    if cfg.occlusion_rate > 0.0 && rng.random_bool(cfg.occlusion_rate.min(1.0)) {
        for _ in 0..20 {
            let target = rng.random_range(0..joints.len());
            let rw = rng.random_range(0.10..0.22) * unit;
            let rh = rng.random_range(0.10..0.22) * unit;
            let cx = joints[target].0 + rng.random_range(-0.3..0.3) * rw;
            let cy = joints[target].1 + rng.random_range(-0.3..0.3) * rh;
            let (x0, x1, y0, y1) = (cx - rw / 2.0, cx + rw / 2.0, cy - rh / 2.0, cy + rh / 2.0);
            // a joint counts as covered when its whole disc is under the box
            let covered: Vec<usize> = (0..joints.len())
                .filter(|&j| {
                    let (x, y) = joints[j];
                    let r = t.joints[j].radius + 0.5;
                    x - r >= x0 && x + r <= x1 && y - r >= y0 && y + r <= y1
                })
                .collect();
            if covered.is_empty() || covered.len() > 3 {
                continue;
            }
            let shade: f32 = rng.random_range(0.15..0.35);
            let (xa, xb, ya, yb) = pixel_window(&img, x0, x1, y0, y1);
            for y in ya..=yb {
                for x in xa..=xb {
                    if (x as f64) < x0 || (x as f64) > x1 || (y as f64) < y0 || (y as f64) > y1 {
                        continue;
                    }
                    let jitter: f32 = rng.random_range(-0.03..0.03);
                    for c in 0..img.channels {
                        img.set(c, y, x, shade + jitter);
                    }
                }
            }
            for j in covered {
                vis[j] = 0.0;
            }
            break;
        }
    }

    let keypoints = joints.iter().zip(&vis).map(|(&(x, y), &v)| Keypoint { x, y, v }).collect();
    let bbox = joint_box(t, &joints, h, w);
    let (ha, hb) = t.head_segment;
    let head_size = ((joints[ha].0 - joints[hb].0).powi(2) + (joints[ha].1 - joints[hb].1).powi(2)).sqrt();
    PoseSample {
        id: format!("synth-{seed}-{index}"),
        image: ImageSource::Loaded(img),
        keypoints,
        bbox,
        scale: (bbox[2] * bbox[3]).sqrt(),
        head_size: Some(head_size),
    }
}

/// Render `count` samples. Sample `i` depends only on `(seed, i)`.
pub fn generate_synthetic(
    seed: u64,
    count: usize,
    template: &SkeletonTemplate,
    cfg: &SynthConfig,
) -> Result<Vec<PoseSample>, DataError> {
    template.validate()?;
    if cfg.height == 0 || cfg.width == 0 || !(cfg.channels == 1 || cfg.channels == 3) {
        return Err(DataError::Invalid(format!(
            "canvas {}x{} with {} channels",
            cfg.height, cfg.width, cfg.channels
        )));
    }
    if !(cfg.scale_min > 0.0 && cfg.scale_max >= cfg.scale_min) || !(0.0..=1.0).contains(&cfg.occlusion_rate) {
        return Err(DataError::Invalid("bad scale range or occlusion rate".into()));
    }
    Ok(par::map_range(count, |i| one_sample(seed, i, template, cfg)))
}
