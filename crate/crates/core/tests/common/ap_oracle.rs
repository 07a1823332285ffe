//! Brute-force reference for keypoint AP: enumerates every detection to
//! ground-truth assignment instead of matching greedily.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenpose::data::Keypoint;
use tokenpose::metrics::{oks, oks_thresholds, ApReport, Detection, GtInstance, ImageEval};

/// All injective partial assignments of `n_det` detections to `n_gt` ground
/// truths, as `assign[d] = Some(g)`.
fn assignments(n_det: usize, n_gt: usize) -> Vec<Vec<Option<usize>>> {
    let mut out = vec![vec![]];
    for _ in 0..n_det {
        let mut next = Vec::new();
        for a in &out {
            next.push({
                let mut b = a.clone();
                b.push(None);
                b
            });
            for g in 0..n_gt {
                if !a.contains(&Some(g)) {
                    let mut b = a.clone();
                    b.push(Some(g));
                    next.push(b);
                }
            }
        }
        out = next;
    }
    out
}

/// Among all valid assignments (every pair at or above `thr`), the one whose
/// per-detection OKS vector, read in score order, is lexicographically largest.
fn oracle_hits(ious: &[Vec<f64>], order: &[usize], n_gt: usize, thr: f64) -> Vec<bool> {
    let n_det = ious.len();
    let mut best: Option<(Vec<f64>, Vec<Option<usize>>)> = None;
    for a in assignments(n_det, n_gt) {
        // a is indexed by rank in score order
        if a.iter().enumerate().any(|(r, g)| g.is_some_and(|g| ious[order[r]][g] < thr)) {
            continue;
        }
        let key: Vec<f64> = a.iter().enumerate().map(|(r, g)| g.map_or(-1.0, |g| ious[order[r]][g])).collect();
        let better = match &best {
            None => true,
            Some((bk, _)) => key.iter().zip(bk).find(|(x, y)| x != y).is_some_and(|(x, y)| x > y),
        };
        if better {
            best = Some((key, a));
        }
    }
    let a = best.unwrap().1;
    let mut hits = vec![false; n_det];
    for (r, g) in a.iter().enumerate() {
        hits[order[r]] = g.is_some();
    }
    hits
}

/// Interpolated AP computed as the mean over recall levels of the best
/// precision achieved at any recall at or beyond the level.
fn oracle_ap(seq: &[bool], num_gt: usize) -> (f64, f64) {
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (i, &h) in seq.iter().enumerate() {
        tp += h as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let p = points.iter().filter(|(rec, _)| *rec >= level).map(|&(_, p)| p).fold(0.0, f64::max);
        sum += p;
    }
    (sum / 101.0, points.last().map_or(0.0, |p| p.0))
}

pub fn oracle_report(images: &[ImageEval], k: &[f64]) -> ApReport {
    let num_gt: usize = images.iter().map(|i| i.gts.len()).sum();
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (i, img) in images.iter().enumerate() {
        for (d, det) in img.dets.iter().enumerate() {
            all.push((det.score, i, d));
        }
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut per = Vec::new();
    let mut recs = Vec::new();
    for thr in oks_thresholds() {
        let hits: Vec<Vec<bool>> = images
            .iter()
            .map(|img| {
                let ious: Vec<Vec<f64>> = img
                    .dets
                    .iter()
                    .map(|d| img.gts.iter().map(|g| oks(&d.keypoints, &g.keypoints, g.scale, k).unwrap()).collect())
                    .collect();
                let mut order: Vec<usize> = (0..img.dets.len()).collect();
                order.sort_by(|&a, &b| img.dets[b].score.partial_cmp(&img.dets[a].score).unwrap());
                oracle_hits(&ious, &order, img.gts.len(), thr)
            })
            .collect();
        let seq: Vec<bool> = all.iter().map(|&(_, i, d)| hits[i][d]).collect();
        let (ap, rec) = oracle_ap(&seq, num_gt);
        per.push(ap);
        recs.push(rec);
    }
    ApReport {
        ap: per.iter().sum::<f64>() / 10.0,
        ap50: per[0],
        ap75: per[5],
        ar: recs.iter().sum::<f64>() / 10.0,
        per_threshold: per,
    }
}

/// Random micro-set: up to 3 images, up to 4 ground truths and 4 detections
/// each, with detections scattered around random ground truths.
pub fn micro_set(seed: u64) -> (Vec<ImageEval>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_joints = 3;
    let k: Vec<f64> = (0..n_joints).map(|_| rng.random_range(0.05..0.2)).collect();
    let images = (0..rng.random_range(1..=3))
        .map(|_| {
            let gts: Vec<GtInstance> = (0..rng.random_range(1..=4))
                .map(|_| GtInstance {
                    keypoints: (0..n_joints)
                        .map(|_| Keypoint {
                            x: rng.random_range(0.0..40.0),
                            y: rng.random_range(0.0..40.0),
                            v: if rng.random_bool(0.85) { 2.0 } else { 0.0 },
                        })
                        .collect(),
                    scale: rng.random_range(8.0..30.0),
                })
                .filter(|g: &GtInstance| g.keypoints.iter().any(|k| k.labeled()))
                .collect();
            let dets = (0..rng.random_range(0..=4))
                .map(|_| {
                    let noise = rng.random_range(0.0..4.0);
                    let keypoints = if gts.is_empty() || rng.random_bool(0.1) {
                        (0..n_joints).map(|_| (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0))).collect()
                    } else {
                        let g = &gts[rng.random_range(0..gts.len())];
                        g.keypoints
                            .iter()
                            .map(|k| (k.x + rng.random_range(-noise..=noise), k.y + rng.random_range(-noise..=noise)))
                            .collect()
                    };
                    Detection { keypoints, score: rng.random_range(0.0..1.0) }
                })
                .collect();
            ImageEval { gts, dets }
        })
        .collect();
    (images, k)
}

