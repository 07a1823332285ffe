//! Keypoint similarity, COCO-style AP/AR and PCKh.

use serde::Serialize;
use thiserror::Error;

use crate::data::Keypoint;
use crate::par;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no labeled keypoints")]
    NoVisibleKeypoints,
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("sample {0} has no head size")]
    MissingHeadSize(usize),
    #[error("{0}")]
    Invalid(String),
}

/// OKS thresholds 0.50, 0.55, ..., 0.95.
pub fn oks_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Object keypoint similarity over labeled joints.
///
/// `s` is the object scale (square root of the box area); `k` holds the
/// per-joint falloff constants.
pub fn oks(pred: &[(f64, f64)], gt: &[Keypoint], s: f64, k: &[f64]) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() || k.len() != gt.len() {
        return Err(MetricsError::Invalid(format!(
            "{} predictions, {} ground-truth joints, {} constants",
            pred.len(),
            gt.len(),
            k.len()
        )));
    }
    let area = (s * s).max(f64::EPSILON);
    let (mut sum, mut n) = (0.0, 0usize);
    for ((p, g), ki) in pred.iter().zip(gt).zip(k) {
        if !g.labeled() {
            continue;
        }
        let d2 = (p.0 - g.x).powi(2) + (p.1 - g.y).powi(2);
        sum += (-d2 / (2.0 * area * ki * ki)).exp();
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::NoVisibleKeypoints);
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone)]
pub struct GtInstance {
    pub keypoints: Vec<Keypoint>,
    /// Object scale `s`.
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub keypoints: Vec<(f64, f64)>,
    pub score: f64,
}

/// Ground truth and detections of one image.
#[derive(Debug, Clone, Default)]
pub struct ImageEval {
    pub gts: Vec<GtInstance>,
    pub dets: Vec<Detection>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ApReport {
    /// Mean AP over the ten OKS thresholds.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar: f64,
    /// AP per threshold, in [`oks_thresholds`] order.
    pub per_threshold: Vec<f64>,
}

/// Per-detection match flags for one image at one threshold. Detections are
/// visited by descending score; each takes the unmatched ground truth with
/// the highest OKS at or above `thr`.
fn match_image(img: &ImageEval, ious: &[Vec<f64>], order: &[usize], thr: f64) -> Vec<bool> {
    let mut taken = vec![false; img.gts.len()];
    let mut hit = vec![false; img.dets.len()];
    for &d in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, taken_g) in taken.iter().enumerate() {
            if *taken_g {
                continue;
            }
            let o = ious[d][g];
            if o >= thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            hit[d] = true;
        }
    }
    hit
}

/// Interpolated precision at 101 recall points, from score-ordered hits.
fn interpolated_ap(hits: &[bool], num_gt: usize) -> (f64, f64) {
    if num_gt == 0 {
        return (0.0, 0.0);
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let (mut tp, mut fp) = (0.0, 0.0);
    for &h in hits {
        if h {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        precision.push(tp / (tp + fp));
        recall.push(tp / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    (sum / 101.0, recall.last().copied().unwrap_or(0.0))
}

/// COCO-style keypoint AP and AR. Ground-truth instances without labeled
/// joints are dropped.
pub fn average_precision(images: &[ImageEval], k: &[f64]) -> Result<ApReport, MetricsError> {
    let images: Vec<ImageEval> = images
        .iter()
        .map(|img| ImageEval {
            gts: img.gts.iter().filter(|g| g.keypoints.iter().any(|kp| kp.labeled())).cloned().collect(),
            dets: img.dets.clone(),
        })
        .collect();
    let num_gt: usize = images.iter().map(|i| i.gts.len()).sum();
    if num_gt == 0 {
        return Err(MetricsError::EmptyEvalSet);
    }
    let ious: Vec<Vec<Vec<f64>>> = par::map_range(images.len(), |i| {
        let img = &images[i];
        img.dets
            .iter()
            .map(|d| img.gts.iter().map(|g| oks(&d.keypoints, &g.keypoints, g.scale, k)).collect())
            .collect::<Result<Vec<Vec<f64>>, _>>()
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    let orders: Vec<Vec<usize>> = images
        .iter()
        .map(|img| {
            let mut o: Vec<usize> = (0..img.dets.len()).collect();
            o.sort_by(|&a, &b| img.dets[b].score.total_cmp(&img.dets[a].score));
            o
        })
        .collect();
    // global score order, ties broken by (image, detection) index
    let mut global: Vec<(usize, usize)> =
        images.iter().enumerate().flat_map(|(i, img)| (0..img.dets.len()).map(move |d| (i, d))).collect();
    global.sort_by(|&(ia, da), &(ib, db)| images[ib].dets[db].score.total_cmp(&images[ia].dets[da].score));

    let mut per_threshold = Vec::new();
    let mut recalls = Vec::new();
    for thr in oks_thresholds() {
        let hits: Vec<Vec<bool>> =
            images.iter().enumerate().map(|(i, img)| match_image(img, &ious[i], &orders[i], thr)).collect();
        let seq: Vec<bool> = global.iter().map(|&(i, d)| hits[i][d]).collect();
        let (ap, rec) = interpolated_ap(&seq, num_gt);
        per_threshold.push(ap);
        recalls.push(rec);
    }
    Ok(ApReport {
        ap: per_threshold.iter().sum::<f64>() / per_threshold.len() as f64,
        ap50: per_threshold[0],
        ap75: per_threshold[5],
        ar: recalls.iter().sum::<f64>() / recalls.len() as f64,
        per_threshold,
    })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PckhReport {
    /// Fraction correct per joint, `None` if the joint was never labeled.
    pub per_joint: Vec<Option<f64>>,
    pub labeled: Vec<usize>,
    /// Correct over labeled, pooled across all joints.
    pub mean: f64,
}

/// PCKh@alpha: a labeled joint is correct when its error is at most
/// `alpha * head_size`.
pub fn pckh(
    preds: &[Vec<(f64, f64)>],
    gts: &[Vec<Keypoint>],
    head_sizes: &[Option<f64>],
    alpha: f64,
) -> Result<PckhReport, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    if preds.len() != gts.len() || preds.len() != head_sizes.len() {
        return Err(MetricsError::Invalid("prediction, ground-truth and head-size counts differ".into()));
    }
    let n = gts[0].len();
    let mut correct = vec![0usize; n];
    let mut labeled = vec![0usize; n];
    for (i, ((p, g), h)) in preds.iter().zip(gts).zip(head_sizes).enumerate() {
        let h = h.filter(|&h| h > 0.0).ok_or(MetricsError::MissingHeadSize(i))?;
        if p.len() != n || g.len() != n {
            return Err(MetricsError::Invalid(format!("sample {i} has a different joint count")));
        }
        for j in 0..n {
            if !g[j].labeled() {
                continue;
            }
            labeled[j] += 1;
            let d = ((p[j].0 - g[j].x).powi(2) + (p[j].1 - g[j].y).powi(2)).sqrt();
            if d <= alpha * h {
                correct[j] += 1;
            }
        }
    }
    let total: usize = labeled.iter().sum();
    Ok(PckhReport {
        per_joint: correct.iter().zip(&labeled).map(|(&c, &l)| (l > 0).then(|| c as f64 / l as f64)).collect(),
        mean: if total > 0 { correct.iter().sum::<usize>() as f64 / total as f64 } else { 0.0 },
        labeled,
    })
}

impl PckhReport {
    /// Per-group columns plus the mean, as percentages.
    pub fn grouped(&self, groups: &[String]) -> Vec<(String, f64)> {
        let mut names: Vec<String> = Vec::new();
        for g in groups {
            if !names.contains(g) {
                names.push(g.clone());
            }
        }
        let mut out: Vec<(String, f64)> = names
            .into_iter()
            .filter_map(|name| {
                let (mut c, mut l) = (0.0, 0usize);
                for (j, g) in groups.iter().enumerate() {
                    if *g == name {
                        if let Some(f) = self.per_joint[j] {
                            c += f * self.labeled[j] as f64;
                            l += self.labeled[j];
                        }
                    }
                }
                (l > 0).then(|| (name, 100.0 * c / l as f64))
            })
            .collect();
        out.push(("Mean".to_string(), 100.0 * self.mean));
        out
    }

    /// Two-line text table: group names, then percentages with one decimal.
    pub fn table(&self, groups: &[String]) -> String {
        let cols = self.grouped(groups);
        let head: Vec<String> = cols.iter().map(|(n, _)| format!("{n:>6}")).collect();
        let vals: Vec<String> = cols.iter().map(|(_, v)| format!("{v:>6.1}")).collect();
        format!("{}\n{}", head.join(" "), vals.join(" "))
    }
}

/// Mean Euclidean error over labeled joints.
pub fn mean_error(preds: &[Vec<(f64, f64)>], gts: &[Vec<Keypoint>]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, g) in preds.iter().zip(gts) {
        for (pp, gg) in p.iter().zip(g) {
            if gg.labeled() {
                sum += ((pp.0 - gg.x).powi(2) + (pp.1 - gg.y).powi(2)).sqrt();
                n += 1;
            }
        }
    }
    if n == 0 { 0.0 } else { sum / n as f64 }
}
