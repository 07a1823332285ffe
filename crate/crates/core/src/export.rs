//! Attention inspection: per-layer keypoint attention maps, keypoint-to-keypoint
//! matrices, top-k constraint tables and the input-token prior matrix.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::data::image::write_pgm16;
use crate::data::{DataError, Image};
use crate::encoder::{keypoint_prior_matrix, AttentionRecord, EncoderOptions};
use crate::model::{ModelError, TokenPose};
use crate::params::ParamStore;
use crate::tensor::{Tensor, TensorError};
use crate::train::{config_from_checkpoint, params_from_checkpoint, Checkpoint, TrainError};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("checkpoint does not match: {0}")]
    IncompatibleCheckpoint(String),
    #[error("keypoint index {index} out of range ({num} keypoints)")]
    KeypointIndex { index: usize, num: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(TrainError),
    #[error("io error on {0}: {1}")]
    Io(String, String),
}

impl From<TrainError> for ExportError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::IncompatibleCheckpoint(m) => ExportError::IncompatibleCheckpoint(m),
            TrainError::Checkpoint(c) => ExportError::IncompatibleCheckpoint(c.to_string()),
            other => ExportError::Train(other),
        }
    }
}

type Result<T> = std::result::Result<T, ExportError>;

#[derive(Debug, Clone)]
pub struct ExportOptions {
    /// Keypoints whose visual attention maps are written; all when `None`.
    pub keypoints: Option<Vec<usize>>,
    pub top_k: usize,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self { keypoints: None, top_k: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintEntry {
    pub name: String,
    pub index: usize,
    /// Head-averaged attention score in the final layer.
    pub score: f64,
    /// Same score after restricting the row to keypoint columns.
    pub renormalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintRow {
    pub keypoint: String,
    pub top: Vec<ConstraintEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct MatrixFile<'a> {
    note: &'a str,
    layer: Option<usize>,
    names: &'a [String],
    matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub files: Vec<PathBuf>,
    /// Patch grid `(rows, cols)`.
    pub grid: (usize, usize),
    /// Head-averaged `[S, S]` attention per layer, 1-based order.
    pub layer_attention: Vec<Vec<f64>>,
    /// Renormalized keypoint-to-keypoint `[N, N]` per layer.
    pub keypoint_attention: Vec<Vec<f64>>,
    pub constraints: Vec<ConstraintRow>,
    pub prior: Vec<f64>,
}

const KK_NOTE: &str = "keypoint-to-keypoint attention averaged over heads; visual columns dropped and each row renormalized to sum to 1";
const PRIOR_NOTE: &str = "input keypoint tokens: inner products scaled by 1/sqrt(d), softmax per row";
const TOPK_NOTE: &str = "final layer; self excluded; score is the head-averaged attention, renormalized is over keypoint columns";

/// Average the per-head records of one sample into one `[S, S]` matrix per layer.
pub fn head_average(records: &[AttentionRecord], layers: usize, sample: usize) -> Vec<Vec<f64>> {
    (1..=layers)
        .map(|l| {
            let rs: Vec<&AttentionRecord> = records.iter().filter(|r| r.layer == l && r.sample == sample).collect();
            let mut m = vec![0.0; rs.first().map_or(0, |r| r.matrix.len())];
            for r in &rs {
                m.iter_mut().zip(&r.matrix).for_each(|(a, b)| *a += b);
            }
            let n = rs.len().max(1) as f64;
            m.iter_mut().for_each(|a| *a /= n);
            m
        })
        .collect()
}

/// Keypoint block of an `[S, S]` matrix with rows renormalized.
pub fn keypoint_block(m: &[f64], s: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let row = &m[i * s..i * s + n];
        let sum: f64 = row.iter().sum();
        out.extend(row.iter().map(|v| if sum > 0.0 { v / sum } else { 1.0 / n as f64 }));
    }
    out
}

/// Top-k other keypoints for each row of the final layer.
pub fn constraints(last: &[f64], s: usize, n: usize, k: usize, names: &[String]) -> Vec<ConstraintRow> {
    let kk = keypoint_block(last, s, n);
    (0..n)
        .map(|i| {
            let mut idx: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            // stable sort keeps the lower index first on ties
            idx.sort_by(|&a, &b| kk[i * n + b].total_cmp(&kk[i * n + a]));
            ConstraintRow {
                keypoint: names[i].clone(),
                top: idx
                    .into_iter()
                    .take(k)
                    .map(|j| ConstraintEntry {
                        name: names[j].clone(),
                        index: j,
                        score: last[i * s + j],
                        renormalized: kk[i * n + j],
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Nearest-neighbour upsample of a `gh x gw` grid by `(ph, pw)`.
pub fn upsample_nearest(grid: &[f64], gh: usize, gw: usize, ph: usize, pw: usize) -> Vec<f64> {
    let (h, w) = (gh * ph, gw * pw);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(grid[(y / ph) * gw + x / pw]);
        }
    }
    out
}

fn rows(m: &[f64], n: usize) -> Vec<Vec<f64>> {
    m.chunks(n).map(<[f64]>::to_vec).collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| ExportError::Io(path.display().to_string(), e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| ExportError::Io(path.display().to_string(), e.to_string()))
}

/// Run one sample (already cropped to the model input) and write every
/// artifact into `out_dir`.
pub fn export_attention(
    model: &TokenPose,
    params: &ParamStore<f32>,
    image: &Image,
    names: &[String],
    out_dir: &Path,
    opts: &ExportOptions,
) -> Result<ExportSummary> {
    let cfg = model.config();
    if (image.channels, image.height, image.width) != (cfg.channels, cfg.input_h, cfg.input_w) {
        return Err(ExportError::IncompatibleCheckpoint(format!(
            "sample is {}x{}x{}, model expects {}x{}x{}",
            image.channels, image.height, image.width, cfg.channels, cfg.input_h, cfg.input_w
        )));
    }
    let n = cfg.num_keypoints;
    if names.len() != n {
        return Err(ExportError::IncompatibleCheckpoint(format!("{} keypoint names for {n} keypoints", names.len())));
    }
    let chosen = opts.keypoints.clone().unwrap_or_else(|| (0..n).collect());
    if let Some(&bad) = chosen.iter().find(|&&k| k >= n) {
        return Err(ExportError::KeypointIndex { index: bad, num: n });
    }
    fs::create_dir_all(out_dir).map_err(|e| ExportError::Io(out_dir.display().to_string(), e.to_string()))?;

    let bound = params.bind(false)?;
    let x = Tensor::new(image.data.clone(), &[1, cfg.channels, cfg.input_h, cfg.input_w])?;
    let fwd = model.forward(&bound, &x, EncoderOptions { record_attention: true }, &mut None)?;
    let (gh, gw) = cfg.grid();
    let (ph, pw) = (cfg.input_h / gh, cfg.input_w / gw);
    let s = n + gh * gw;
    let layers = head_average(&fwd.state.attention, cfg.num_layers, 0);

    let mut files = Vec::new();
    let mut kk_all = Vec::new();
    for (li, m) in layers.iter().enumerate() {
        let l = li + 1;
        for &k in &chosen {
            let grid = &m[k * s + n..(k + 1) * s];
            let comment = format!("layer {l} keypoint {} attention over the {gh}x{gw} patch grid, head average", names[k]);
            let p = out_dir.join(format!("attn_l{l:02}_k{k:02}_grid.pgm"));
            write_pgm16(&p, grid, gw, gh, &[&comment])?;
            files.push(p);
            let up = upsample_nearest(grid, gh, gw, ph, pw);
            let p = out_dir.join(format!("attn_l{l:02}_k{k:02}.pgm"));
            write_pgm16(&p, &up, gw * pw, gh * ph, &[&comment, "nearest upsampled to input size"])?;
            files.push(p);
        }
        let kk = keypoint_block(m, s, n);
        let p = out_dir.join(format!("kk_l{l:02}.pgm"));
        write_pgm16(&p, &kk, n, n, &[KK_NOTE, &format!("layer {l}")])?;
        files.push(p);
        let p = out_dir.join(format!("kk_l{l:02}.json"));
        write_json(&p, &MatrixFile { note: KK_NOTE, layer: Some(l), names, matrix: rows(&kk, n) })?;
        files.push(p);
        kk_all.push(kk);
    }

    let table = match layers.last() {
        Some(last) => constraints(last, s, n, opts.top_k.min(n.saturating_sub(1)), names),
        None => Vec::new(),
    };
    let p = out_dir.join("constraints.json");
    write_json(&p, &serde_json::json!({ "note": TOPK_NOTE, "top_k": opts.top_k, "rows": table }))?;
    files.push(p);

    let prior = keypoint_prior_matrix(&model.keypoint_table(&bound));
    let p = out_dir.join("prior.pgm");
    write_pgm16(&p, &prior, n, n, &[PRIOR_NOTE])?;
    files.push(p);
    let p = out_dir.join("prior.json");
    write_json(&p, &MatrixFile { note: PRIOR_NOTE, layer: None, names, matrix: rows(&prior, n) })?;
    files.push(p);

    Ok(ExportSummary { files, grid: (gh, gw), layer_attention: layers, keypoint_attention: kk_all, constraints: table, prior })
}

/// Same as [`export_attention`], rebuilding the model from a checkpoint.
pub fn export_from_checkpoint(
    ck: &Checkpoint,
    image: &Image,
    names: &[String],
    out_dir: &Path,
    opts: &ExportOptions,
) -> Result<ExportSummary> {
    let cfg = config_from_checkpoint(ck)?;
    let params = params_from_checkpoint(&cfg.model, ck)?;
    let model = TokenPose::new(&cfg.model, &params)?;
    export_attention(&model, &params, image, names, out_dir, opts)
}
