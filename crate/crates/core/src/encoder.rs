//! Pre-LN transformer encoder over keypoint + visual tokens.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{concat, Scalar, Tensor, TensorError};
use crate::tokenizer::{KeypointTokenTable, TokenSequence};

/// LayerNorm epsilon used throughout the encoder and head.
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("embed dim {d} is not divisible by {h} heads")]
    IndivisibleHeads { d: usize, h: usize },
    #[error("invalid layer index {index} (encoder has {num_layers} layers)")]
    InvalidLayerIndex { index: usize, num_layers: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, EncoderError>;

/// Post-softmax attention weights of one head in one layer for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    /// 1-based encoder layer.
    pub layer: usize,
    pub head: usize,
    pub sample: usize,
    /// Sequence length S; `matrix` is `S x S` row-major.
    pub size: usize,
    pub matrix: Vec<f64>,
}

impl AttentionRecord {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.size..(i + 1) * self.size]
    }
}

/// Training-time dropout applied after softmax and after the MLP activation.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn dropout<T: Scalar>(x: Tensor<T>, drop: &mut Option<Dropout<'_>>) -> Result<Tensor<T>> {
    let Some(d) = drop.as_mut() else {
        return Ok(x);
    };
    if d.p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - d.p;
    let scale = T::from_f64(1.0 / keep);
    let mask: Vec<T> = (0..x.numel())
        .map(|_| if d.rng.random::<f64>() < keep { scale } else { T::zero() })
        .collect();
    Ok(x.mul(&Tensor::new(mask, x.shape())?)?)
}

/// Lift `[S, d]` to `[1, S, d]`; returns whether it was lifted.
fn batched<T: Scalar>(t: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    if t.rank() == 2 {
        let s = t.shape();
        Ok((t.reshape(&[1, s[0], s[1]])?, true))
    } else {
        Ok((t.clone(), false))
    }
}

fn unbatch<T: Scalar>(t: Tensor<T>, lifted: bool) -> Result<Tensor<T>> {
    if lifted {
        let s = t.shape()[1..].to_vec();
        Ok(t.reshape(&s)?)
    } else {
        Ok(t)
    }
}

/// Single-head scaled dot-product self-attention:
/// `softmax(T·Wq (T·Wk)ᵀ / √d_h) · T·Wv`, with `Wq, Wk, Wv: [d, d_h]`.
/// Returns the output `[.., S, d_h]` and the attention matrix `[.., S, S]`.
pub fn self_attention<T: Scalar>(
    t: &Tensor<T>,
    wq: &Tensor<T>,
    wk: &Tensor<T>,
    wv: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let dh = wq.shape()[1];
    let q = t.matmul(wq)?;
    let k = t.matmul(wk)?;
    let v = t.matmul(wv)?;
    let scores = q.matmul(&k.transpose_last2()?)?.scale(T::from_f64(1.0 / (dh as f64).sqrt()));
    let attn = scores.softmax_lastdim();
    Ok((attn.matmul(&v)?, attn))
}

/// Records for every (sample, head) of an `[B, h, S, S]` attention tensor.
pub fn attention_records<T: Scalar>(attn: &Tensor<T>, layer: usize) -> Vec<AttentionRecord> {
    let s = attn.shape();
    let (b, h, n) = (s[0], s[1], s[2]);
    let data = attn.data();
    let mut out = Vec::with_capacity(b * h);
    for sample in 0..b {
        for head in 0..h {
            let off = (sample * h + head) * n * n;
            out.push(AttentionRecord {
                layer,
                head,
                sample,
                size: n,
                matrix: data[off..off + n * n].iter().map(|v| v.as_f64()).collect(),
            });
        }
    }
    out
}

/// Multi-head self-attention projections. Head `j` uses columns
/// `j·d_h..(j+1)·d_h` of `wq`, `wk`, `wv`.
pub struct MsaWeights<'a, T: Scalar> {
    pub wq: &'a Tensor<T>,
    pub wk: &'a Tensor<T>,
    pub wv: &'a Tensor<T>,
    pub wp: &'a Tensor<T>,
    pub bp: Option<&'a Tensor<T>>,
}

/// `concat(SA_1..SA_h) · W_P (+ b_P)`, with `d_h = d / h`. Returns the output
/// `[.., S, d]` and the attention tensor `[B, h, S, S]`.
pub fn multi_head_attention<T: Scalar>(
    t: &Tensor<T>,
    heads: usize,
    w: &MsaWeights<'_, T>,
    drop: &mut Option<Dropout<'_>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (x, lifted) = batched(t)?;
    let [b, s, d] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    if heads == 0 || d % heads != 0 {
        return Err(EncoderError::IndivisibleHeads { d, h: heads });
    }
    let dh = d / heads;
    let split = |p: &Tensor<T>, perm: &[usize]| -> Result<Tensor<T>> {
        Ok(x.matmul(p)?.reshape(&[b, s, heads, dh])?.permute(perm)?)
    };
    let q = split(w.wq, &[0, 2, 1, 3])?;
    let kt = split(w.wk, &[0, 2, 3, 1])?;
    let v = split(w.wv, &[0, 2, 1, 3])?;
    let scores = q.matmul(&kt)?.scale(T::from_f64(1.0 / (dh as f64).sqrt()));
    let attn = scores.softmax_lastdim();
    let mixed = dropout(attn.clone(), drop)?.matmul(&v)?;
    let merged = mixed.permute(&[0, 2, 1, 3])?.reshape(&[b, s, d])?;
    let mut out = merged.matmul(w.wp)?;
    if let Some(bp) = w.bp {
        out = out.add(bp)?;
    }
    Ok((unbatch(out, lifted)?, attn))
}

pub struct BlockWeights<'a, T: Scalar> {
    pub ln1_gamma: &'a Tensor<T>,
    pub ln1_beta: &'a Tensor<T>,
    pub msa: MsaWeights<'a, T>,
    pub ln2_gamma: &'a Tensor<T>,
    pub ln2_beta: &'a Tensor<T>,
    pub fc1: &'a Tensor<T>,
    pub fc1_bias: &'a Tensor<T>,
    pub fc2: &'a Tensor<T>,
    pub fc2_bias: &'a Tensor<T>,
}

/// `t' = t + MSA(LN(t))`, `out = t' + MLP(LN(t'))` with a GELU MLP.
pub fn encoder_block<T: Scalar>(
    t: &Tensor<T>,
    heads: usize,
    w: &BlockWeights<'_, T>,
    drop: &mut Option<Dropout<'_>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let normed = t.layer_norm(w.ln1_gamma, w.ln1_beta, LN_EPS)?;
    let (msa, attn) = multi_head_attention(&normed, heads, &w.msa, drop)?;
    let mid = t.add(&msa)?;
    let h = mid
        .layer_norm(w.ln2_gamma, w.ln2_beta, LN_EPS)?
        .matmul(w.fc1)?
        .add(w.fc1_bias)?
        .gelu();
    let mlp = dropout(h, drop)?.matmul(w.fc2)?.add(w.fc2_bias)?;
    Ok((mid.add(&mlp)?, attn))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EncoderOptions {
    pub record_attention: bool,
}

/// Per-layer outputs of a forward pass through the stack.
#[derive(Debug, Clone)]
pub struct EncoderState<T: Scalar> {
    /// `T^0 ..= T^M`; `layers[0]` is the assembled input sequence.
    pub layers: Vec<Tensor<T>>,
    pub attention: Vec<AttentionRecord>,
    pub n_keypoint: usize,
}

impl<T: Scalar> EncoderState<T> {
    pub fn num_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn output(&self) -> &Tensor<T> {
        self.layers.last().expect("at least the input layer")
    }

    /// Keypoint rows `[.., N, d]` of `T^layer`.
    pub fn keypoint_rows(&self, layer: usize) -> Result<Tensor<T>> {
        let t = self.layers.get(layer).ok_or(EncoderError::InvalidLayerIndex {
            index: layer,
            num_layers: self.num_layers(),
        })?;
        Ok(t.narrow(t.rank() - 2, 0, self.n_keypoint)?)
    }
}

/// Apply the blocks in order, keeping every layer's tokens.
pub fn run_encoder<T: Scalar>(
    seq: &TokenSequence<T>,
    heads: usize,
    blocks: &[BlockWeights<'_, T>],
    opts: EncoderOptions,
    drop: &mut Option<Dropout<'_>>,
) -> Result<EncoderState<T>> {
    let mut layers = vec![seq.tokens.clone()];
    let mut attention = Vec::new();
    for (l, w) in blocks.iter().enumerate() {
        let (next, attn) = encoder_block(layers.last().expect("non-empty"), heads, w, drop)?;
        if opts.record_attention {
            let attn = if attn.rank() == 3 {
                let mut s = vec![1];
                s.extend_from_slice(attn.shape());
                attn.reshape(&s)?
            } else {
                attn
            };
            attention.extend(attention_records(&attn, l + 1));
        }
        layers.push(next);
    }
    Ok(EncoderState {
        layers,
        attention,
        n_keypoint: seq.n_keypoint,
    })
}

/// Concatenate each keypoint's token from the chosen layers (1-based, in the
/// given order): `[.., N, k·d]`.
pub fn fuse_keypoint_tokens<T: Scalar>(state: &EncoderState<T>, layers: &[usize]) -> Result<Tensor<T>> {
    let m = state.num_layers();
    if layers.is_empty() {
        return Err(EncoderError::InvalidLayerIndex { index: 0, num_layers: m });
    }
    for (i, &l) in layers.iter().enumerate() {
        if l > m || (i > 0 && l <= layers[i - 1]) {
            return Err(EncoderError::InvalidLayerIndex { index: l, num_layers: m });
        }
    }
    let rows = layers
        .iter()
        .map(|&l| state.keypoint_rows(l))
        .collect::<Result<Vec<_>>>()?;
    if rows.len() == 1 {
        return Ok(rows.into_iter().next().expect("one"));
    }
    let refs: Vec<&Tensor<T>> = rows.iter().collect();
    let axis = refs[0].rank() - 1;
    Ok(concat(&refs, axis)?)
}

/// Learned prior affinity between keypoint types: the inner-product matrix of
/// the input keypoint tokens scaled by `1/√d`, softmax-normalized per row.
/// Returns `N x N` row-major.
pub fn keypoint_prior_matrix<T: Scalar>(table: &KeypointTokenTable<T>) -> Vec<f64> {
    let (n, d) = (table.num_keypoints(), table.dim());
    let e = table.embeddings.data();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let row = &mut out[i * n..(i + 1) * n];
        for (j, r) in row.iter_mut().enumerate() {
            *r = (0..d).map(|c| e[i * d + c].as_f64() * e[j * d + c].as_f64()).sum::<f64>() * scale;
        }
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for r in row.iter_mut() {
            *r = (*r - mx).exp();
            s += *r;
        }
        row.iter_mut().for_each(|r| *r /= s);
    }
    out
}
