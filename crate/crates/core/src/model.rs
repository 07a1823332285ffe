//! Full network: tokenizer, encoder stack and heatmap head over one
//! parameter store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, ModelConfig, PeMode, StemKind, STEM_CHANNELS, STEM_HIDDEN};
use crate::data::Image;
use crate::encoder::{
    fuse_keypoint_tokens, run_encoder, BlockWeights, Dropout, EncoderError, EncoderOptions, EncoderState,
    MsaWeights, LN_EPS,
};
use crate::heatmap::head_forward;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor, TensorError};
use crate::tokenizer::{
    assemble, conv_stem, embed_visual, fixed_position_table, patchify, trunc_normal, KeypointTokenTable,
    PositionEmbedding, StemWeights, TokenizerError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("unexpected parameter {0}")]
    UnexpectedParam(String),
    #[error("input batch has shape {0:?}")]
    InputShape(Vec<usize>),
}

type Result<T> = std::result::Result<T, ModelError>;

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±√(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    TruncNormal,
    Zeros,
    Ones,
}

/// Every trainable tensor of a config, in store order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.embed_dim;
    let hidden = cfg.mlp_hidden();
    let hw = cfg.heatmap_h * cfg.heatmap_w;
    let width = cfg.head_width();
    let mut v = Vec::new();
    let mat = |v: &mut Vec<_>, name: String, r: usize, c: usize| {
        v.push((name, vec![r, c], Init::Xavier { fan_in: r, fan_out: c }));
    };
    if cfg.stem == StemKind::ConvStem {
        let c = cfg.channels;
        v.push(("stem.conv1.weight".into(), vec![STEM_HIDDEN, c, 3, 3], Init::Xavier { fan_in: c * 9, fan_out: STEM_HIDDEN * 9 }));
        v.push(("stem.conv1.bias".into(), vec![STEM_HIDDEN], Init::Zeros));
        v.push((
            "stem.conv2.weight".into(),
            vec![STEM_CHANNELS, STEM_HIDDEN, 3, 3],
            Init::Xavier { fan_in: STEM_HIDDEN * 9, fan_out: STEM_CHANNELS * 9 },
        ));
        v.push(("stem.conv2.bias".into(), vec![STEM_CHANNELS], Init::Zeros));
    }
    mat(&mut v, "patch_embed.weight".into(), cfg.patch_len(), d);
    v.push(("patch_embed.bias".into(), vec![d], Init::Zeros));
    if cfg.pe_mode == PeMode::Learnable {
        v.push(("pos_embed".into(), vec![cfg.num_visual(), d], Init::TruncNormal));
    }
    v.push(("keypoint_tokens".into(), vec![cfg.num_keypoints, d], Init::TruncNormal));
    for l in 0..cfg.num_layers {
        let p = format!("blocks.{l}");
        v.push((format!("{p}.norm1.weight"), vec![d], Init::Ones));
        v.push((format!("{p}.norm1.bias"), vec![d], Init::Zeros));
        for w in ["wq", "wk", "wv"] {
            mat(&mut v, format!("{p}.attn.{w}"), d, d);
        }
        mat(&mut v, format!("{p}.attn.proj.weight"), d, d);
        v.push((format!("{p}.attn.proj.bias"), vec![d], Init::Zeros));
        v.push((format!("{p}.norm2.weight"), vec![d], Init::Ones));
        v.push((format!("{p}.norm2.bias"), vec![d], Init::Zeros));
        mat(&mut v, format!("{p}.mlp.fc1.weight"), d, hidden);
        v.push((format!("{p}.mlp.fc1.bias"), vec![hidden], Init::Zeros));
        mat(&mut v, format!("{p}.mlp.fc2.weight"), hidden, d);
        v.push((format!("{p}.mlp.fc2.bias"), vec![d], Init::Zeros));
    }
    v.push(("head.norm.weight".into(), vec![width], Init::Ones));
    v.push(("head.norm.bias".into(), vec![width], Init::Zeros));
    mat(&mut v, "head.weight".into(), width, hw);
    v.push(("head.bias".into(), vec![hw], Init::Zeros));
    v
}

/// Exact number of trainable scalars for `cfg`.
pub fn count_params(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

/// Fresh parameters for `cfg`, drawn in store order from `seed`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in param_specs(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
            Init::TruncNormal => trunc_normal(&mut rng, n, 0.02),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        store.add(name, &shape, data.into_iter().map(T::from_f64).collect());
    }
    Ok(store)
}

struct BlockIds {
    ln1: (ParamId, ParamId),
    q: ParamId,
    k: ParamId,
    v: ParamId,
    proj: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

struct Ids {
    stem: Option<[ParamId; 4]>,
    patch: (ParamId, ParamId),
    pos: Option<ParamId>,
    keypoints: ParamId,
    blocks: Vec<BlockIds>,
    head_norm: (ParamId, ParamId),
    head: (ParamId, ParamId),
}

/// Output of one forward pass.
pub struct Forward<T: Scalar> {
    /// `[B, N, Ĥ, Ŵ]`.
    pub heatmaps: Tensor<T>,
    pub state: EncoderState<T>,
}

/// The network: config plus resolved parameter handles.
pub struct TokenPose {
    cfg: ModelConfig,
    ids: Ids,
}

impl TokenPose {
    /// Check that `store` holds exactly the parameters `cfg` needs.
    pub fn new<T: Scalar>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let specs = param_specs(cfg);
        for (name, shape, _) in &specs {
            let p = store.by_name(name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if &p.shape != shape {
                return Err(ModelError::ParamShape { name: name.clone(), expected: shape.clone(), found: p.shape.clone() });
            }
        }
        if store.len() != specs.len() {
            let extra = store.iter().find(|p| !specs.iter().any(|(n, _, _)| *n == p.name)).map(|p| p.name.clone());
            return Err(ModelError::UnexpectedParam(extra.unwrap_or_default()));
        }
        let id = |n: &str| store.id(n).expect("checked above");
        let pair = |n: &str| (id(&format!("{n}.weight")), id(&format!("{n}.bias")));
        let stem = (cfg.stem == StemKind::ConvStem).then(|| {
            [id("stem.conv1.weight"), id("stem.conv1.bias"), id("stem.conv2.weight"), id("stem.conv2.bias")]
        });
        let blocks = (0..cfg.num_layers)
            .map(|l| {
                let p = format!("blocks.{l}");
                BlockIds {
                    ln1: pair(&format!("{p}.norm1")),
                    q: id(&format!("{p}.attn.wq")),
                    k: id(&format!("{p}.attn.wk")),
                    v: id(&format!("{p}.attn.wv")),
                    proj: pair(&format!("{p}.attn.proj")),
                    ln2: pair(&format!("{p}.norm2")),
                    fc1: pair(&format!("{p}.mlp.fc1")),
                    fc2: pair(&format!("{p}.mlp.fc2")),
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            ids: Ids {
                stem,
                patch: pair("patch_embed"),
                pos: store.id("pos_embed"),
                keypoints: id("keypoint_tokens"),
                blocks,
                head_norm: pair("head.norm"),
                head: (id("head.weight"), id("head.bias")),
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn keypoint_table<T: Scalar>(&self, bound: &Bound<T>) -> KeypointTokenTable<T> {
        KeypointTokenTable::new(bound.get(self.ids.keypoints).clone())
    }

    /// `images: [B, c, H, W]` to heatmaps `[B, N, Ĥ, Ŵ]`.
    pub fn forward<T: Scalar>(
        &self,
        bound: &Bound<T>,
        images: &Tensor<T>,
        opts: EncoderOptions,
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<Forward<T>> {
        let cfg = &self.cfg;
        let s = images.shape();
        if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.input_h || s[3] != cfg.input_w {
            return Err(ModelError::InputShape(s.to_vec()));
        }
        let p = |id: ParamId| bound.get(id);
        let features = match self.ids.stem {
            Some([c1, b1, c2, b2]) => {
                conv_stem(images, &StemWeights { conv1: p(c1), bias1: p(b1), conv2: p(c2), bias2: p(b2) })?
            }
            None => images.clone(),
        };
        let patches = patchify(&features, cfg.patch_h, cfg.patch_w)?;
        let pe = match (cfg.pe_mode, self.ids.pos) {
            (PeMode::Learnable, Some(id)) => PositionEmbedding::Table(p(id).clone()),
            (PeMode::Sine2d, _) => PositionEmbedding::Table(fixed_position_table(cfg).expect("sine table")),
            _ => PositionEmbedding::None,
        };
        let visual = embed_visual(&patches, p(self.ids.patch.0), Some(p(self.ids.patch.1)), &pe)?;
        let seq = assemble(&self.keypoint_table(bound), &visual)?;
        let blocks: Vec<BlockWeights<'_, T>> = self
            .ids
            .blocks
            .iter()
            .map(|b| BlockWeights {
                ln1_gamma: p(b.ln1.0),
                ln1_beta: p(b.ln1.1),
                msa: MsaWeights { wq: p(b.q), wk: p(b.k), wv: p(b.v), wp: p(b.proj.0), bp: Some(p(b.proj.1)) },
                ln2_gamma: p(b.ln2.0),
                ln2_beta: p(b.ln2.1),
                fc1: p(b.fc1.0),
                fc1_bias: p(b.fc1.1),
                fc2: p(b.fc2.0),
                fc2_bias: p(b.fc2.1),
            })
            .collect();
        let state = run_encoder(&seq, cfg.num_heads, &blocks, opts, drop)?;
        let tokens = if cfg.num_layers == 0 {
            state.keypoint_rows(0)?
        } else {
            fuse_keypoint_tokens(&state, &cfg.head_layers())?
        };
        let tokens = tokens.layer_norm(p(self.ids.head_norm.0), p(self.ids.head_norm.1), LN_EPS)?;
        let heatmaps = head_forward(&tokens, p(self.ids.head.0), Some(p(self.ids.head.1)), cfg.heatmap_h, cfg.heatmap_w)?;
        Ok(Forward { heatmaps, state })
    }
}

/// Stack images into a `[B, c, H, W]` tensor.
pub fn batch_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| ModelError::InputShape(vec![0]))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(ModelError::InputShape(vec![img.channels, img.height, img.width]));
        }
        data.extend(img.data.iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok(Tensor::new(data, &[images.len(), c, h, w])?)
}
