//! Training loop, evaluation driver and checkpoint plumbing.

pub mod checkpoint;
pub mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::data::{
    crop_to_input, generate_synthetic, load_annotations, CropTransform, DataError, Keypoint, SkeletonTemplate,
    SynthConfig,
};
use crate::data::skeleton::COCO_SIGMAS;
use crate::encoder::{Dropout, EncoderOptions};
use crate::heatmap::{decode, mse_loss, targets_for, DecodeMode, DecodedPose, HeatmapSet};
use crate::metrics::{average_precision, mean_error, pckh, ApReport, Detection, GtInstance, ImageEval, MetricsError};
use crate::model::{count_params, init_params, ModelError, TokenPose};
use crate::params::ParamStore;
use crate::tensor::{Tensor, TensorError};

pub use checkpoint::{Checkpoint, CheckpointError};
pub use optim::{adam_step, lr_at, AdamConfig, AdamState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not match the model: {0}")]
    IncompatibleCheckpoint(String),
    #[error("json: {0}")]
    Json(String),
    #[error("io error on {0}: {1}")]
    Io(String, String),
    #[error("step {step} (batch {batch:?}): {source}")]
    Batch {
        step: u64,
        batch: Vec<usize>,
        #[source]
        source: Box<TrainError>,
    },
}

type Result<T> = std::result::Result<T, TrainError>;

fn default_template() -> String {
    "stick8".into()
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        seed: u64,
        count: usize,
        #[serde(default = "default_template")]
        template: String,
        #[serde(default)]
        render: SynthConfig,
    },
    Annotations {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub base_lr: f64,
    /// Epochs at which the rate is divided by `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub epochs: usize,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Dropout after attention softmax and MLP activation.
    pub dropout: f64,
    /// Target Gaussian width in heatmap pixels.
    pub sigma: f64,
    /// Random horizontal flips during training.
    pub flip: bool,
    /// Save a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Evaluate on the validation set every this many epochs (0: never).
    pub eval_every: usize,
    pub decode: DecodeMode,
    pub train_data: DataSource,
    pub val_data: Option<DataSource>,
    /// Per-joint OKS constants; defaults to the template's.
    pub oks_k: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    /// Desk-scale recipe: 30 epochs with drops at 20 and 26.
    fn default() -> Self {
        let render = SynthConfig::default();
        Self {
            model: ModelConfig::toy(),
            base_lr: 1e-3,
            lr_drop_epochs: vec![20, 26],
            lr_drop_factor: 10.0,
            epochs: 30,
            max_steps: None,
            batch_size: 16,
            seed: 0,
            adam: AdamConfig::default(),
            dropout: 0.0,
            sigma: crate::heatmap::DEFAULT_SIGMA,
            flip: false,
            checkpoint_every: 0,
            eval_every: 1,
            decode: DecodeMode::Subpixel,
            train_data: DataSource::Synthetic { seed: 1, count: 512, template: "stick8".into(), render: render.clone() },
            val_data: Some(DataSource::Synthetic { seed: 2, count: 64, template: "stick8".into(), render }),
            oks_k: None,
        }
    }
}

pub fn template_by_name(name: &str) -> Result<SkeletonTemplate> {
    match name {
        "coco17" => Ok(SkeletonTemplate::coco17()),
        "stick8" => Ok(SkeletonTemplate::stick8()),
        other => Err(TrainError::Config(format!("unknown template {other:?}"))),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[1] <= w[0]) || self.lr_drop_epochs.iter().any(|&e| e >= self.epochs) {
            return bad(format!("lr_drop_epochs {:?} must ascend and stay below {}", self.lr_drop_epochs, self.epochs));
        }
        if !(self.base_lr > 0.0 && self.lr_drop_factor > 0.0 && self.sigma > 0.0) {
            return bad("base_lr, lr_drop_factor and sigma must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        for src in std::iter::once(&self.train_data).chain(&self.val_data) {
            if let DataSource::Synthetic { template, .. } = src {
                let t = template_by_name(template)?;
                if t.num_joints() != self.model.num_keypoints {
                    return bad(format!("template {template} has {} joints, model expects {}", t.num_joints(), self.model.num_keypoints));
                }
            }
        }
        if let Some(k) = &self.oks_k {
            if k.len() != self.model.num_keypoints || k.iter().any(|&v| v <= 0.0) {
                return bad("oks_k needs one positive constant per keypoint".into());
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.base_lr, &self.lr_drop_epochs, self.lr_drop_factor)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| TrainError::Json(format!("{}: {}", e.path(), e.inner())))
    }
}

/// One sample prepared for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    /// `[c, H, W]` input pixels.
    pub image: Vec<f32>,
    /// Keypoints in input pixels.
    pub keypoints: Vec<Keypoint>,
    /// Keypoints in original-image pixels.
    pub original: Vec<Keypoint>,
    pub transform: CropTransform,
    /// Object scale in original pixels.
    pub scale: f64,
    /// Head size in original pixels.
    pub head_size: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub template: Option<SkeletonTemplate>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Load (or render) a source and crop every sample to the model input.
pub fn load_dataset(src: &DataSource, model: &ModelConfig) -> Result<Dataset> {
    let (samples, template) = match src {
        DataSource::Synthetic { seed, count, template, render } => {
            let t = template_by_name(template)?;
            let render = SynthConfig { channels: model.channels, ..render.clone() };
            (generate_synthetic(*seed, *count, &t, &render)?, Some(t))
        }
        DataSource::Annotations { path } => {
            let s = load_annotations(path, model.num_keypoints)?;
            (s, (model.num_keypoints == 17).then(SkeletonTemplate::coco17))
        }
    };
    let items = samples
        .iter()
        .map(|s| {
            let p = crop_to_input(s, model.input_h, model.input_w)?;
            if p.image.channels != model.channels {
                return Err(TrainError::Config(format!("sample {} has {} channels", s.id, p.image.channels)));
            }
            Ok(Item {
                id: s.id.clone(),
                image: p.image.data,
                keypoints: p.keypoints,
                original: s.keypoints.clone(),
                transform: p.transform,
                scale: s.scale,
                head_size: s.head_size,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { items, template })
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, 1)));
    order
}

fn flip_item(item: &Item, t: &SkeletonTemplate, c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<Keypoint>) {
    let mut img = vec![0.0; item.image.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                img[row + w - 1 - x] = item.image[row + x];
            }
        }
    }
    let kps = t
        .flip_permutation()
        .iter()
        .map(|&j| {
            let k = item.keypoints[j];
            Keypoint { x: (w - 1) as f64 - k.x, ..k }
        })
        .collect();
    (img, kps)
}

/// Predictions for one item.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub id: String,
    /// Decoded pose in input pixels.
    pub input: DecodedPose,
    /// Coordinates in original-image pixels.
    pub original: Vec<(f64, f64)>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub count: usize,
    /// Mean error over labeled joints, input pixels.
    pub mean_error: f64,
    pub pckh: Option<f64>,
    pub pckh_table: Option<Vec<(String, f64)>>,
    pub ap: Option<ApReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mean_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_pckh: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ap: Option<f64>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: TokenPose,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub train: Dataset,
    pub val: Option<Dataset>,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let train = load_dataset(&cfg.train_data, &cfg.model)?;
        let val = cfg.val_data.as_ref().map(|v| load_dataset(v, &cfg.model)).transpose()?;
        Self::with_data(cfg, train, val)
    }

    /// Fresh parameters, caller-provided data.
    pub fn with_data(cfg: TrainConfig, train: Dataset, val: Option<Dataset>) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(TrainError::Config("empty training set".into()));
        }
        let params = init_params::<f32>(&cfg.model, cfg.seed)?;
        let model = TokenPose::new(&cfg.model, &params)?;
        log::info!(
            "model: {} parameters, {} visual tokens, {} train samples",
            count_params(&cfg.model),
            cfg.model.num_visual(),
            train.len()
        );
        let adam = AdamState::zeros(&params);
        Ok(Self { cfg, model, params, adam, train, val, step: 0 })
    }

    /// Restore parameters, moments, step and config from a checkpoint.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let cfg = config_from_checkpoint(ck)?;
        let train = load_dataset(&cfg.train_data, &cfg.model)?;
        let val = cfg.val_data.as_ref().map(|v| load_dataset(v, &cfg.model)).transpose()?;
        Self::resume_with_data(ck, train, val)
    }

    pub fn resume_with_data(ck: &Checkpoint, train: Dataset, val: Option<Dataset>) -> Result<Self> {
        let cfg = config_from_checkpoint(ck)?;
        let mut t = Self::with_data(cfg, train, val)?;
        t.params = params_from_checkpoint(&t.cfg.model, ck)?;
        for (i, p) in t.params.iter().enumerate() {
            for (slot, prefix) in [(&mut t.adam.m[i], "adam.m."), (&mut t.adam.v[i], "adam.v.")] {
                let e = ck.require(&format!("{prefix}{}", p.name))?;
                if e.shape != p.shape {
                    return Err(TrainError::IncompatibleCheckpoint(e.name.clone()));
                }
                slot.clone_from(&e.data);
            }
        }
        t.step = ck.u64("meta.step")?;
        t.adam.t = t.step;
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn epoch(&self) -> usize {
        (self.step / self.steps_per_epoch()) as usize
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr_at(self.epoch())
    }

    /// Indices of the batch the next step will use.
    pub fn next_batch(&self) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = ((self.step / spe) as usize, (self.step % spe) as usize);
        let order = epoch_order(self.cfg.seed, epoch, self.train.len());
        let bs = self.cfg.batch_size;
        order[pos * bs..((pos + 1) * bs).min(order.len())].to_vec()
    }

    /// One optimizer step; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.next_batch();
        let step = self.step;
        self.step_on(&batch).map_err(|e| TrainError::Batch { step, batch, source: Box::new(e) })
    }

    fn step_on(&mut self, batch: &[usize]) -> Result<f64> {
        let m = &self.cfg.model;
        let (c, h, w) = (m.channels, m.input_h, m.input_w);
        let (hh, hw) = (m.heatmap_h, m.heatmap_w);
        let (sx, sy) = (hw as f64 / w as f64, hh as f64 / h as f64);
        let mut aug = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, self.step, 2));
        let mut images = Vec::with_capacity(batch.len() * c * h * w);
        let mut targets = Vec::with_capacity(batch.len() * m.num_keypoints * hh * hw);
        let mut weights = Vec::with_capacity(batch.len() * m.num_keypoints);
        for &i in batch {
            let item = &self.train.items[i];
            let flipped = match &self.train.template {
                Some(t) if self.cfg.flip && aug.random_bool(0.5) => Some(flip_item(item, t, c, h, w)),
                _ => None,
            };
            let (img, kps) = match &flipped {
                Some((img, kps)) => (img, kps),
                None => (&item.image, &item.keypoints),
            };
            images.extend_from_slice(img);
            let scaled: Vec<(f64, f64, f64)> = kps.iter().map(|k| (k.x * sx, k.y * sy, k.v)).collect();
            let (set, wts) = targets_for(&scaled, self.cfg.sigma, hh, hw);
            targets.extend(set.maps.iter().map(|&v| v as f32));
            weights.extend(wts);
        }
        let b = batch.len();
        let x = Tensor::new(images, &[b, c, h, w])?;
        let target = Tensor::new(targets, &[b, m.num_keypoints, hh, hw])?;
        let bound = self.params.bind(true)?;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(mix(self.cfg.seed, self.step, 3));
        let mut drop = (self.cfg.dropout > 0.0).then(|| Dropout { p: self.cfg.dropout, rng: &mut drop_rng });
        let out = self.model.forward(&bound, &x, EncoderOptions::default(), &mut drop)?;
        let loss = mse_loss(&out.heatmaps, &target, &weights)?;
        loss.backward()?;
        let grads = bound.grads();
        let lr = self.lr();
        adam_step(&mut self.params, &grads, &mut self.adam, lr, &self.cfg.adam)?;
        self.step += 1;
        Ok(loss.item() as f64)
    }

    /// Run to the end of the current epoch (or `max_steps`); returns the mean
    /// batch loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let end = (self.epoch() as u64 + 1) * self.steps_per_epoch();
        let end = self.cfg.max_steps.map_or(end, |m| end.min(m));
        let (mut sum, mut n) = (0.0, 0usize);
        while self.step < end {
            sum += self.train_step()?;
            n += 1;
        }
        Ok(if n > 0 { sum / n as f64 } else { 0.0 })
    }

    /// Heatmaps for a run of items, in batches.
    pub fn heatmaps(&self, items: &[Item]) -> Result<Vec<HeatmapSet>> {
        predict_heatmaps(&self.model, &self.params, items, self.cfg.batch_size)
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<Prediction>> {
        predict(&self.model, &self.params, &data.items, self.cfg.batch_size, self.cfg.decode)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<EvalReport> {
        let preds = self.predict(data)?;
        evaluate_predictions(&preds, data, self.oks_constants(data)?)
    }

    fn oks_constants(&self, data: &Dataset) -> Result<Option<Vec<f64>>> {
        if let Some(k) = &self.cfg.oks_k {
            return Ok(Some(k.clone()));
        }
        Ok(match &data.template {
            Some(t) => Some(t.oks_constants()),
            None if self.cfg.model.num_keypoints == 17 => Some(COCO_SIGMAS.iter().map(|s| 2.0 * s).collect()),
            None => None,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        for p in self.params.iter() {
            ck.push(p.name.clone(), &p.shape, p.data.clone())?;
        }
        for (i, p) in self.params.iter().enumerate() {
            ck.push(format!("adam.m.{}", p.name), &p.shape, self.adam.m[i].clone())?;
            ck.push(format!("adam.v.{}", p.name), &p.shape, self.adam.v[i].clone())?;
        }
        ck.push_u64("meta.step", self.step)?;
        ck.push_bytes("meta.config", self.cfg.to_json().as_bytes())?;
        Ok(ck)
    }
}

pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<TrainConfig> {
    let bytes = ck.bytes("meta.config")?;
    let text = String::from_utf8(bytes).map_err(|_| TrainError::IncompatibleCheckpoint("meta.config is not UTF-8".into()))?;
    TrainConfig::from_json(&text)
}

/// Model parameters from a checkpoint, checked against `cfg`.
pub fn params_from_checkpoint(cfg: &ModelConfig, ck: &Checkpoint) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for (name, shape, _) in crate::model::param_specs(cfg) {
        let e = ck.get(&name).ok_or_else(|| TrainError::IncompatibleCheckpoint(format!("missing {name}")))?;
        if e.shape != shape {
            return Err(TrainError::IncompatibleCheckpoint(format!("{name}: shape {:?}, expected {shape:?}", e.shape)));
        }
        store.add(name, &shape, e.data.clone());
    }
    Ok(store)
}

/// Forward passes without gradients.
pub fn predict_heatmaps(model: &TokenPose, params: &ParamStore<f32>, items: &[Item], batch: usize) -> Result<Vec<HeatmapSet>> {
    let cfg = model.config();
    let bound = params.bind(false)?;
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * chunk[0].image.len());
        for it in chunk {
            data.extend_from_slice(&it.image);
        }
        let x = Tensor::new(data, &[chunk.len(), cfg.channels, cfg.input_h, cfg.input_w])?;
        let f = model.forward(&bound, &x, EncoderOptions::default(), &mut None)?;
        out.extend(HeatmapSet::from_tensor(&f.heatmaps));
    }
    Ok(out)
}

pub fn predict(model: &TokenPose, params: &ParamStore<f32>, items: &[Item], batch: usize, mode: DecodeMode) -> Result<Vec<Prediction>> {
    let cfg = model.config();
    let maps = predict_heatmaps(model, params, items, batch)?;
    Ok(items
        .iter()
        .zip(&maps)
        .map(|(it, hm)| {
            let pose = decode(hm, mode, cfg.input_h, cfg.input_w);
            Prediction {
                id: it.id.clone(),
                original: pose.coords.iter().map(|&(u, v)| it.transform.to_original(u, v)).collect(),
                score: pose.mean_score(),
                input: pose,
            }
        })
        .collect())
}

/// Mean error, PCKh@0.5 (when every item has a head size) and AP (when OKS
/// constants are known).
pub fn evaluate_predictions(preds: &[Prediction], data: &Dataset, k: Option<Vec<f64>>) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(MetricsError::EmptyEvalSet.into());
    }
    let input: Vec<Vec<(f64, f64)>> = preds.iter().map(|p| p.input.coords.clone()).collect();
    let gt_in: Vec<Vec<Keypoint>> = data.items.iter().map(|i| i.keypoints.clone()).collect();
    let orig: Vec<Vec<(f64, f64)>> = preds.iter().map(|p| p.original.clone()).collect();
    let gt_orig: Vec<Vec<Keypoint>> = data.items.iter().map(|i| i.original.clone()).collect();
    let heads: Vec<Option<f64>> = data.items.iter().map(|i| i.head_size).collect();
    let (pckh_mean, table) = if heads.iter().all(Option::is_some) {
        let r = pckh(&orig, &gt_orig, &heads, 0.5)?;
        let table = data.template.as_ref().map(|t| r.grouped(&t.groups()));
        (Some(r.mean), table)
    } else {
        (None, None)
    };
    let ap = match k {
        Some(k) => {
            let images: Vec<ImageEval> = preds
                .iter()
                .zip(&data.items)
                .map(|(p, it)| ImageEval {
                    gts: vec![GtInstance { keypoints: it.original.clone(), scale: it.scale }],
                    dets: vec![Detection { keypoints: p.original.clone(), score: p.score }],
                })
                .collect();
            match average_precision(&images, &k) {
                Ok(r) => Some(r),
                Err(MetricsError::EmptyEvalSet) => None,
                Err(e) => return Err(e.into()),
            }
        }
        None => None,
    };
    Ok(EvalReport { count: preds.len(), mean_error: mean_error(&input, &gt_in), pckh: pckh_mean, pckh_table: table, ap })
}

/// Everything a finished run produced.
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<EpochRecord>,
}

fn io_err(p: &Path, e: std::io::Error) -> TrainError {
    TrainError::Io(p.display().to_string(), e.to_string())
}

/// Train to `cfg.epochs` (or `max_steps`), evaluating and checkpointing as
/// configured. With `out_dir`, writes `metrics.jsonl`, periodic
/// `epoch_XXXX.tkpz` and `final.tkpz`.
pub fn train(trainer: Trainer, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = trainer;
    let mut log_file = match out_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
            let p = d.join("metrics.jsonl");
            Some((fs::OpenOptions::new().create(true).append(true).open(&p).map_err(|e| io_err(&p, e))?, p))
        }
        None => None,
    };
    let mut log = Vec::new();
    let done = |t: &Trainer| t.epoch() >= t.cfg.epochs || t.cfg.max_steps.is_some_and(|m| t.step() >= m);
    while !done(&trainer) {
        let epoch = trainer.epoch();
        let lr = trainer.lr();
        let loss = trainer.run_epoch()?;
        let mut rec = EpochRecord { epoch, step: trainer.step(), lr, train_loss: loss, val_mean_error: None, val_pckh: None, val_ap: None };
        let finished = done(&trainer);
        let ev = trainer.cfg.eval_every;
        if ev > 0 && ((epoch + 1) % ev == 0 || finished) {
            if let Some(val) = &trainer.val {
                let r = trainer.evaluate(val)?;
                rec.val_mean_error = Some(r.mean_error);
                rec.val_pckh = r.pckh;
                rec.val_ap = r.ap.as_ref().map(|a| a.ap);
            }
        }
        log::info!(
            "epoch {epoch} step {} lr {lr:.1e} loss {loss:.6}{}",
            rec.step,
            rec.val_pckh.map(|p| format!(" val PCKh {:.1}", 100.0 * p)).unwrap_or_default()
        );
        if let Some((f, p)) = log_file.as_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| TrainError::Json(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| io_err(p, e))?;
        }
        if let Some(d) = out_dir {
            let every = trainer.cfg.checkpoint_every;
            if every > 0 && (epoch + 1) % every == 0 {
                trainer.checkpoint()?.save(&d.join(format!("epoch_{:04}.tkpz", epoch + 1)))?;
            }
        }
        log.push(rec);
    }
    if let Some(d) = out_dir {
        trainer.checkpoint()?.save(&d.join("final.tkpz"))?;
    }
    Ok(TrainOutcome { trainer, log })
}
