use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use tokenpose::data::{
    crop_to_input, generate_synthetic, load_annotations, write_annotations, Image, SkeletonTemplate, SynthConfig,
};
use tokenpose::export::{export_from_checkpoint, ExportOptions};
use tokenpose::heatmap::DecodeMode;
use tokenpose::model::count_params;
use tokenpose::train::{
    config_from_checkpoint, evaluate_predictions, load_dataset, params_from_checkpoint, predict, predict_heatmaps,
    template_by_name, train, Checkpoint, DataSource, TrainConfig, Trainer,
};
use tokenpose::model::TokenPose;
use tokenpose::ModelConfig;

#[derive(Parser)]
#[command(name = "tokenpose", version, about = "Keypoint-token pose estimation on the CPU")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// JSON training config; defaults apply for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set model.num_layers=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset to PPM images plus a keypoint annotation file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value = "stick8")]
        template: String,
        /// JSON render settings.
        #[arg(long)]
        render: Option<PathBuf>,
        #[arg(long, default_value = "annotations.json")]
        name: String,
    },
    /// Train a model; writes metrics.jsonl and checkpoints to --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint (its config wins over --config).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints an EvalReport as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Annotation file; defaults to the checkpoint's validation source.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        decode: Option<Decode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict keypoints for every sample of an annotation file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        decode: Option<Decode>,
        /// Also write predicted heatmaps (16-bit PGM) here.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write attention maps, keypoint-keypoint matrices and constraint tables.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample id or zero-based index.
        #[arg(long, default_value = "0")]
        sample: String,
        /// Comma-separated keypoint indices (default: all).
        #[arg(long, value_delimiter = ',')]
        keypoints: Option<Vec<usize>>,
        #[arg(long, default_value_t = 2)]
        top_k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count trainable parameters.
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model preset; --set still applies on top.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum Decode {
    Argmax,
    Subpixel,
}

impl From<Decode> for DecodeMode {
    fn from(d: Decode) -> Self {
        match d {
            Decode::Argmax => DecodeMode::Argmax,
            Decode::Subpixel => DecodeMode::Subpixel,
        }
    }
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum Preset {
    Toy,
    TokenposeT,
    TokenposeSV1,
}

type BoxError = Box<dyn std::error::Error>;

/// Parse `a.b.c=value` and write it into a JSON tree. The value is read as
/// JSON when it parses, else as a string.
fn apply_set(root: &mut Value, assignment: &str) -> Result<(), BoxError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| format!("--set {assignment:?}: expected KEY=VALUE"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| format!("--set {key}: {part} is not inside an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn load_config(args: &ConfigArgs, base: TrainConfig) -> Result<TrainConfig, BoxError> {
    let mut tree = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            let mut base_tree = serde_json::to_value(&base)?;
            let user: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?;
            merge(&mut base_tree, user);
            base_tree
        }
        None => serde_json::to_value(&base)?,
    };
    for s in &args.set {
        apply_set(&mut tree, s)?;
    }
    let cfg = TrainConfig::from_json(&tree.to_string())?;
    Ok(cfg)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn emit(value: &impl serde::Serialize, out: Option<&Path>) -> Result<(), BoxError> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n").map_err(|e| format!("{}: {e}", p.display()))?,
        None => {
            // a closed pipe (e.g. `| head`) is not an error
            let _ = writeln!(std::io::stdout(), "{text}");
        }
    }
    Ok(())
}

/// Joint names of the template the model was trained on, else `k0, k1, ..`.
fn keypoint_names(cfg: &TrainConfig) -> Vec<String> {
    let n = cfg.model.num_keypoints;
    let template = match &cfg.train_data {
        DataSource::Synthetic { template, .. } => template_by_name(template).ok(),
        DataSource::Annotations { .. } => (n == 17).then(SkeletonTemplate::coco17),
    };
    match template {
        Some(t) if t.num_joints() == n => t.joints.iter().map(|j| j.name.clone()).collect(),
        _ => (0..n).map(|i| format!("k{i}")).collect(),
    }
}

fn run(cli: Cli) -> Result<(), BoxError> {
    match cli.cmd {
        Cmd::GenData { out, seed, count, template, render, name } => {
            let t = template_by_name(&template)?;
            let render: SynthConfig = match render {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?)?,
                None => SynthConfig::default(),
            };
            let samples = generate_synthetic(seed, count, &t, &render)?;
            let path = write_annotations(&samples, &t, &out, &name)?;
            log::info!("wrote {count} samples to {}", out.display());
            let _ = writeln!(std::io::stdout(), "{}", path.display());
        }
        Cmd::Train { cfg, out, resume } => {
            let trainer = match resume {
                Some(p) => {
                    let ck = Checkpoint::load(&p)?;
                    let t = Trainer::resume(&ck)?;
                    log::info!("resumed {} at step {}", p.display(), t.step());
                    t
                }
                None => {
                    let cfg = load_config(&cfg, TrainConfig::default())?;
                    fs::create_dir_all(&out)?;
                    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
                    Trainer::new(cfg)?
                }
            };
            let outcome = train(trainer, Some(&out))?;
            match outcome.log.last() {
                Some(last) => emit(last, None)?,
                None => log::warn!("nothing to do: training already finished"),
            }
        }
        Cmd::Eval { checkpoint, data, decode, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mut cfg = config_from_checkpoint(&ck)?;
            if let Some(d) = decode {
                cfg.decode = d.into();
            }
            let src = match data {
                Some(path) => DataSource::Annotations { path },
                None => cfg.val_data.clone().ok_or("no --data and the checkpoint has no validation source")?,
            };
            let dataset = load_dataset(&src, &cfg.model)?;
            let params = params_from_checkpoint(&cfg.model, &ck)?;
            let model = TokenPose::new(&cfg.model, &params)?;
            let preds = predict(&model, &params, &dataset.items, cfg.batch_size, cfg.decode)?;
            let k = cfg.oks_k.clone().or_else(|| dataset.template.as_ref().map(|t| t.oks_constants()));
            let report = evaluate_predictions(&preds, &dataset, k)?;
            emit(&report, out.as_deref())?;
        }
        Cmd::Infer { checkpoint, data, decode, heatmaps, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = config_from_checkpoint(&ck)?;
            let mode = decode.map(DecodeMode::from).unwrap_or(cfg.decode);
            let dataset = load_dataset(&DataSource::Annotations { path: data }, &cfg.model)?;
            let params = params_from_checkpoint(&cfg.model, &ck)?;
            let model = TokenPose::new(&cfg.model, &params)?;
            let preds = predict(&model, &params, &dataset.items, cfg.batch_size, mode)?;
            if let Some(dir) = heatmaps {
                fs::create_dir_all(&dir)?;
                let maps = predict_heatmaps(&model, &params, &dataset.items, cfg.batch_size)?;
                for (i, m) in maps.iter().enumerate() {
                    m.write_pgm(&dir, &format!("{i:06}"))?;
                }
            }
            emit(&preds, out.as_deref())?;
        }
        Cmd::ExportAttention { checkpoint, data, sample, keypoints, top_k, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = config_from_checkpoint(&ck)?;
            let samples = load_annotations(&data, cfg.model.num_keypoints)?;
            let chosen = samples
                .iter()
                .find(|s| s.id == sample)
                .or_else(|| sample.parse::<usize>().ok().and_then(|i| samples.get(i)))
                .ok_or_else(|| format!("no sample {sample:?} in {}", data.display()))?;
            let prepared = crop_to_input(chosen, cfg.model.input_h, cfg.model.input_w)?;
            let image: Image = prepared.image;
            let names = keypoint_names(&cfg);
            let summary = export_from_checkpoint(&ck, &image, &names, &out, &ExportOptions { keypoints, top_k })?;
            log::info!("wrote {} files to {}", summary.files.len(), out.display());
            emit(&summary.constraints, None)?;
        }
        Cmd::Params { cfg, preset } => {
            let mut base = TrainConfig::default();
            if let Some(p) = preset {
                base.model = match p {
                    Preset::Toy => ModelConfig::toy(),
                    Preset::TokenposeT => ModelConfig::tokenpose_t(),
                    Preset::TokenposeSV1 => ModelConfig::tokenpose_s_v1(),
                };
            }
            // only the model section matters here
            let mut tree = serde_json::to_value(&base)?;
            if let Some(p) = &cfg.config {
                merge(&mut tree, serde_json::from_str(&fs::read_to_string(p)?)?);
            }
            for s in &cfg.set {
                apply_set(&mut tree, s)?;
            }
            let model: ModelConfig = serde_json::from_value(tree["model"].take())?;
            model.validate()?;
            emit(&serde_json::json!({ "params": count_params(&model), "visual_tokens": model.num_visual(), "model": model }), None)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            let mut src = e.source();
            while let Some(s) = src {
                log::error!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
