use serde::{Deserialize, Serialize};

use super::DataError;

/// COCO per-keypoint sigmas (nose, eyes, ears, shoulders, elbows, wrists,
/// hips, knees, ankles). The OKS falloff constant is `k = 2σ`.
pub const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    /// Rest position relative to the root, in units of the canvas' shorter side.
    pub rest: (f64, f64),
    /// Disc radius in pixels.
    pub radius: f64,
    /// Disc color; distinct per joint.
    pub color: [f32; 3],
    /// OKS falloff constant k_i.
    pub oks_k: f64,
    /// Column of the PCKh table this joint is reported under.
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bone {
    pub parent: usize,
    pub child: usize,
    /// Rest length in canvas units.
    pub length: f64,
}

/// Articulated stick figure: joints, a bone tree, left/right pairs and the
/// segment whose rendered length defines the head size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTemplate {
    pub name: String,
    pub joints: Vec<JointSpec>,
    pub bones: Vec<Bone>,
    pub symmetry: Vec<(usize, usize)>,
    pub head_segment: (usize, usize),
    pub limb_color: [f32; 3],
    pub limb_half_width: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

impl SkeletonTemplate {
    fn build(
        name: &str,
        joints: &[(&str, (f64, f64), f64, &str)],
        edges: &[(usize, usize)],
        symmetry: &[(usize, usize)],
        head_segment: (usize, usize),
    ) -> Self {
        let n = joints.len();
        let joints: Vec<JointSpec> = joints
            .iter()
            .enumerate()
            .map(|(i, &(name, rest, k, group))| JointSpec {
                name: name.to_string(),
                rest,
                radius: 2.5,
                color: hsv(i as f64 / n as f64, 0.85, 1.0),
                oks_k: k,
                group: group.to_string(),
            })
            .collect();
        let bones = edges
            .iter()
            .map(|&(p, c)| {
                let (a, b) = (joints[p].rest, joints[c].rest);
                Bone {
                    parent: p,
                    child: c,
                    length: ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt(),
                }
            })
            .collect();
        Self {
            name: name.to_string(),
            joints,
            bones,
            symmetry: symmetry.to_vec(),
            head_segment,
            limb_color: [0.5, 0.5, 0.5],
            limb_half_width: 1.2,
        }
    }

    /// 17 joints in COCO order.
    pub fn coco17() -> Self {
        let k = |i: usize| 2.0 * COCO_SIGMAS[i];
        Self::build(
            "coco17",
            &[
                ("nose", (0.0, -0.30), k(0), "Hea"),
                ("left_eye", (0.03, -0.33), k(1), "Hea"),
                ("right_eye", (-0.03, -0.33), k(2), "Hea"),
                ("left_ear", (0.065, -0.31), k(3), "Hea"),
                ("right_ear", (-0.065, -0.31), k(4), "Hea"),
                ("left_shoulder", (0.12, -0.18), k(5), "Sho"),
                ("right_shoulder", (-0.12, -0.18), k(6), "Sho"),
                ("left_elbow", (0.17, -0.02), k(7), "Elb"),
                ("right_elbow", (-0.17, -0.02), k(8), "Elb"),
                ("left_wrist", (0.20, 0.12), k(9), "Wri"),
                ("right_wrist", (-0.20, 0.12), k(10), "Wri"),
                ("left_hip", (0.08, 0.08), k(11), "Hip"),
                ("right_hip", (-0.08, 0.08), k(12), "Hip"),
                ("left_knee", (0.09, 0.28), k(13), "Kne"),
                ("right_knee", (-0.09, 0.28), k(14), "Kne"),
                ("left_ankle", (0.10, 0.47), k(15), "Ank"),
                ("right_ankle", (-0.10, 0.47), k(16), "Ank"),
            ],
            &[
                (0, 1), (0, 2), (1, 3), (2, 4), (0, 5), (0, 6), (5, 7), (7, 9), (6, 8), (8, 10),
                (5, 11), (6, 12), (11, 13), (13, 15), (12, 14), (14, 16),
            ],
            &[(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)],
            (3, 4),
        )
    }

    /// Eight-joint figure for small canvases.
    pub fn stick8() -> Self {
        Self::build(
            "stick8",
            &[
                ("head", (0.0, -0.17), 0.10, "Hea"),
                ("neck", (0.0, 0.0), 0.10, "Nck"),
                ("left_elbow", (0.16, 0.09), 0.12, "Elb"),
                ("right_elbow", (-0.16, 0.09), 0.12, "Elb"),
                ("left_wrist", (0.22, 0.25), 0.12, "Wri"),
                ("right_wrist", (-0.22, 0.25), 0.12, "Wri"),
                ("left_ankle", (0.11, 0.46), 0.15, "Ank"),
                ("right_ankle", (-0.11, 0.46), 0.15, "Ank"),
            ],
            &[(1, 0), (1, 2), (2, 4), (1, 3), (3, 5), (1, 6), (1, 7)],
            &[(2, 3), (4, 5), (6, 7)],
            (0, 1),
        )
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn oks_constants(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.oks_k).collect()
    }

    pub fn groups(&self) -> Vec<String> {
        self.joints.iter().map(|j| j.group.clone()).collect()
    }

    /// Index of the joint with no parent.
    pub fn root(&self) -> usize {
        let mut has_parent = vec![false; self.joints.len()];
        for b in &self.bones {
            has_parent[b.child] = true;
        }
        has_parent.iter().position(|&p| !p).unwrap_or(0)
    }

    /// Joint permutation that swaps every symmetry pair.
    pub fn flip_permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.joints.len()).collect();
        for &(a, b) in &self.symmetry {
            perm.swap(a, b);
        }
        perm
    }

    /// Bones form a tree over all joints; symmetry pairs are valid and disjoint.
    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.joints.len();
        let err = |m: String| Err(DataError::TemplateInvalid(m));
        if n == 0 {
            return err("no joints".into());
        }
        if self.bones.len() != n - 1 {
            return err(format!("{} bones for {n} joints, a tree needs {}", self.bones.len(), n - 1));
        }
        let mut parent = vec![None; n];
        for b in &self.bones {
            if b.parent >= n || b.child >= n || b.parent == b.child {
                return err(format!("bad bone {}->{}", b.parent, b.child));
            }
            if parent[b.child].replace(b.parent).is_some() {
                return err(format!("joint {} has two parents", b.child));
            }
            if !(b.length.is_finite() && b.length >= 0.0) {
                return err(format!("bad bone length {}", b.length));
            }
        }
        // every joint must reach the unique root without cycles
        let roots = parent.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return err(format!("{roots} roots"));
        }
        for start in 0..n {
            let (mut j, mut steps) = (start, 0);
            while let Some(p) = parent[j] {
                j = p;
                steps += 1;
                if steps > n {
                    return err("cycle in bones".into());
                }
            }
        }
        let mut used = vec![false; n];
        for &(a, b) in &self.symmetry {
            if a >= n || b >= n || a == b || used[a] || used[b] {
                return err(format!("bad symmetry pair ({a}, {b})"));
            }
            used[a] = true;
            used[b] = true;
        }
        let (h0, h1) = self.head_segment;
        if h0 >= n || h1 >= n || h0 == h1 {
            return err("bad head segment".into());
        }
        if self.joints.iter().any(|j| j.radius <= 0.0 || j.oks_k <= 0.0) {
            return err("joint radius and oks constant must be positive".into());
        }
        Ok(())
    }
}
