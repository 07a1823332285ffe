//! Image (or stem feature map) to visual tokens, position embeddings, and the
//! learnable keypoint tokens.

use rand::Rng;
use thiserror::Error;

use crate::config::{ModelConfig, PeMode};
use crate::tensor::{concat, conv2d, Scalar, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenizerError {
    #[error("image {h}x{w} is not divisible into {patch_h}x{patch_w} patches")]
    NonDivisiblePatch {
        h: usize,
        w: usize,
        patch_h: usize,
        patch_w: usize,
    },
    #[error("image {h}x{w} is not divisible by 4")]
    NonDivisible { h: usize, w: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, TokenizerError>;

/// `[b, c, h, w]` view of an image or a batch of images.
fn as_batch<T: Scalar>(image: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    match image.rank() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(image.shape());
            Ok((image.reshape(&s)?, true))
        }
        4 => Ok((image.clone(), false)),
        _ => Err(TensorError::InvalidShape {
            shape: image.shape().to_vec(),
            reason: "expected [c,h,w] or [b,c,h,w]".into(),
        }
        .into()),
    }
}

/// Split `[c,h,w]` (or `[b,c,h,w]`) into row-major patches. Each output row is
/// one patch flattened pixel-major with channels innermost, giving
/// `[L, patch_h·patch_w·c]` (or `[b, L, ..]`).
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch_h: usize, patch_w: usize) -> Result<Tensor<T>> {
    let (x, single) = as_batch(image)?;
    let [b, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    if patch_h == 0 || patch_w == 0 || h % patch_h != 0 || w % patch_w != 0 {
        return Err(TokenizerError::NonDivisiblePatch { h, w, patch_h, patch_w });
    }
    let (gh, gw) = (h / patch_h, w / patch_w);
    let out = x
        .reshape(&[b, c, gh, patch_h, gw, patch_w])?
        .permute(&[0, 2, 4, 3, 5, 1])?
        .reshape(&[b, gh * gw, patch_h * patch_w * c])?;
    Ok(if single { out.reshape(&[gh * gw, patch_h * patch_w * c])? } else { out })
}

/// Inverse of [`patchify`] for a `(grid_h, grid_w)` patch grid.
pub fn unpatchify<T: Scalar>(
    patches: &Tensor<T>,
    grid: (usize, usize),
    patch_h: usize,
    patch_w: usize,
) -> Result<Tensor<T>> {
    let single = patches.rank() == 2;
    let s = patches.shape();
    let (b, l, p) = if single { (1, s[0], s[1]) } else { (s[0], s[1], s[2]) };
    let (gh, gw) = grid;
    if l != gh * gw || p % (patch_h * patch_w) != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "unpatchify",
            lhs: s.to_vec(),
            rhs: vec![gh, gw, patch_h, patch_w],
        }
        .into());
    }
    let c = p / (patch_h * patch_w);
    let out = patches
        .reshape(&[b, gh, gw, patch_h, patch_w, c])?
        .permute(&[0, 5, 1, 3, 2, 4])?
        .reshape(&[b, c, gh * patch_h, gw * patch_w])?;
    Ok(if single { out.reshape(&[c, gh * patch_h, gw * patch_w])? } else { out })
}

/// Fixed 2D sinusoidal table `[grid_h·grid_w, d]`. The first `d/2` channels
/// encode the patch column, the last `d/2` its row; inside each half,
/// channel `2i` is `sin(pos / 10000^(2i/(d/2)))` and `2i+1` the matching cosine.
pub fn sine2d_table(grid_h: usize, grid_w: usize, d: usize) -> Vec<f64> {
    assert!(d % 4 == 0, "sine2d needs d divisible by 4");
    let half = d / 2;
    let mut out = vec![0.0; grid_h * grid_w * d];
    let encode = |pos: usize, dst: &mut [f64]| {
        for i in 0..half / 2 {
            let freq = 10000f64.powf((2 * i) as f64 / half as f64);
            let a = pos as f64 / freq;
            dst[2 * i] = a.sin();
            dst[2 * i + 1] = a.cos();
        }
    };
    for r in 0..grid_h {
        for c in 0..grid_w {
            let row = &mut out[(r * grid_w + c) * d..(r * grid_w + c + 1) * d];
            let (col_half, row_half) = row.split_at_mut(half);
            encode(c, col_half);
            encode(r, row_half);
        }
    }
    out
}

/// Position embedding added to visual tokens.
#[derive(Debug, Clone)]
pub enum PositionEmbedding<T: Scalar> {
    None,
    /// Fixed (non-trainable) or learnable `[L, d]` table.
    Table(Tensor<T>),
}

impl<T: Scalar> PositionEmbedding<T> {
    pub fn apply(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            PositionEmbedding::None => Ok(tokens.clone()),
            PositionEmbedding::Table(pe) => Ok(tokens.add(pe)?),
        }
    }
}

/// Linear patch projection plus position embedding: `[.., L, p] -> [.., L, d]`.
pub fn embed_visual<T: Scalar>(
    patches: &Tensor<T>,
    projection: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pe: &PositionEmbedding<T>,
) -> Result<Tensor<T>> {
    let mut x = patches.matmul(projection)?;
    if let Some(b) = bias {
        x = x.add(b)?;
    }
    pe.apply(&x)
}

/// Stem weights: two 3x3 stride-2 convolutions.
pub struct StemWeights<'a, T: Scalar> {
    pub conv1: &'a Tensor<T>,
    pub bias1: &'a Tensor<T>,
    pub conv2: &'a Tensor<T>,
    pub bias2: &'a Tensor<T>,
}

/// Downsample `[c,h,w]` (or batched) to a quarter of the spatial size:
/// conv 3x3/2 -> GELU -> conv 3x3/2 -> GELU.
pub fn conv_stem<T: Scalar>(image: &Tensor<T>, w: &StemWeights<'_, T>) -> Result<Tensor<T>> {
    let (x, single) = as_batch(image)?;
    let (h, wd) = (x.shape()[2], x.shape()[3]);
    if h % 4 != 0 || wd % 4 != 0 {
        return Err(TokenizerError::NonDivisible { h, w: wd });
    }
    let y = conv2d(&x, w.conv1, Some(w.bias1), 2, 1)?.gelu();
    let y = conv2d(&y, w.conv2, Some(w.bias2), 2, 1)?.gelu();
    if single {
        let s = y.shape()[1..].to_vec();
        Ok(y.reshape(&s)?)
    } else {
        Ok(y)
    }
}

/// The `N` learnable keypoint tokens, `[N, d]`.
#[derive(Debug, Clone)]
pub struct KeypointTokenTable<T: Scalar> {
    pub embeddings: Tensor<T>,
}

impl<T: Scalar> KeypointTokenTable<T> {
    pub fn new(embeddings: Tensor<T>) -> Self {
        Self { embeddings }
    }

    pub fn num_keypoints(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }
}

/// Truncated-normal init: std 0.02, resampled outside ±2σ.
pub fn trunc_normal<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let normal = rand_distr::Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v: f64 = rng.sample(normal);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

/// Keypoint tokens followed by visual tokens.
#[derive(Debug, Clone)]
pub struct TokenSequence<T: Scalar> {
    /// `[N+L, d]`, or `[b, N+L, d]` for a batch.
    pub tokens: Tensor<T>,
    pub n_keypoint: usize,
    pub n_visual: usize,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.n_keypoint + self.n_visual
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Concatenate keypoint tokens (indices `0..N`) and visual tokens (`N..N+L`).
/// Keypoint tokens carry no position embedding and are shared across a batch.
pub fn assemble<T: Scalar>(keypoints: &KeypointTokenTable<T>, visual: &Tensor<T>) -> Result<TokenSequence<T>> {
    let kp = &keypoints.embeddings;
    let d = kp.shape()[1];
    if visual.shape().last() != Some(&d) || !(2..=3).contains(&visual.rank()) {
        return Err(TensorError::ShapeMismatch {
            op: "assemble",
            lhs: kp.shape().to_vec(),
            rhs: visual.shape().to_vec(),
        }
        .into());
    }
    let (tokens, n_visual) = if visual.rank() == 2 {
        (concat(&[kp, visual], 0)?, visual.shape()[0])
    } else {
        let b = visual.shape()[0];
        (concat(&[&kp.expand_front(b)?, visual], 1)?, visual.shape()[1])
    };
    Ok(TokenSequence {
        tokens,
        n_keypoint: kp.shape()[0],
        n_visual,
    })
}

/// Position-embedding table for a config, as a fixed tensor (sine2d) or `None`.
/// Learnable tables live in the parameter store.
pub fn fixed_position_table<T: Scalar>(cfg: &ModelConfig) -> Option<Tensor<T>> {
    match cfg.pe_mode {
        PeMode::Sine2d => {
            let (gh, gw) = cfg.grid();
            let table = sine2d_table(gh, gw, cfg.embed_dim);
            Some(
                Tensor::new(table.into_iter().map(T::from_f64).collect(), &[gh * gw, cfg.embed_dim])
                    .expect("valid table shape"),
            )
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn seq(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64).collect()
    }

    #[test]
    fn patchify_enumeration_contract() {
        let img = Tensor::new(seq(16), &[1, 4, 4]).unwrap();
        let p = patchify(&img, 2, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        // pixels (0,0),(0,1),(1,0),(1,1)
        assert_eq!(&p.data()[..4], &[0., 1., 4., 5.]);
        assert_eq!(&p.data()[4..8], &[2., 3., 6., 7.]);
        assert_eq!(&p.data()[12..], &[10., 11., 14., 15.]);
    }

    #[test]
    fn patchify_tokenpose_t_dimensions() {
        let img = Tensor::<f32>::zeros(&[3, 256, 192]).unwrap();
        let p = patchify(&img, 16, 12).unwrap();
        assert_eq!(p.shape(), &[256, 576]);
        assert!(matches!(patchify(&img, 15, 12), Err(TokenizerError::NonDivisiblePatch { .. })));
    }

    #[test]
    fn channels_are_innermost() {
        let img = Tensor::new(seq(2 * 2 * 2), &[2, 2, 2]).unwrap();
        let p = patchify(&img, 2, 2).unwrap();
        assert_eq!(p.data(), &[0., 4., 1., 5., 2., 6., 3., 7.]);
    }

    #[test]
    fn sine_table_origin_and_bounds() {
        let t = sine2d_table(4, 3, 8);
        assert_eq!((t[0], t[1]), (0.0, 1.0));
        assert_eq!((t[4], t[5]), (0.0, 1.0));
        assert!(t.iter().all(|v| (-1.0..=1.0).contains(v)));
        // column 1, row 0: first half moves, second half stays at the origin
        let p = &t[8..16];
        assert!((p[0] - 1f64.sin()).abs() < 1e-15);
        assert_eq!((p[4], p[5]), (0.0, 1.0));
    }

    #[test]
    fn embed_visual_zero_case_and_pe_input_independence() {
        let patches = Tensor::<f64>::zeros(&[4, 6]).unwrap();
        let proj = Tensor::new(seq(6 * 8), &[6, 8]).unwrap();
        let zb = Tensor::<f64>::zeros(&[8]).unwrap();
        let out = embed_visual(&patches, &proj, Some(&zb), &PositionEmbedding::None).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let pe = PositionEmbedding::Table(Tensor::new(sine2d_table(2, 2, 8), &[4, 8]).unwrap());
        let a = Tensor::new(seq(24), &[4, 6]).unwrap();
        let b = Tensor::new(seq(24).iter().map(|v| v * 0.5 - 3.0).collect(), &[4, 6]).unwrap();
        let ea = embed_visual(&a, &proj, Some(&zb), &pe).unwrap();
        let eb = embed_visual(&b, &proj, Some(&zb), &pe).unwrap();
        let na = embed_visual(&a, &proj, Some(&zb), &PositionEmbedding::None).unwrap();
        let nb = embed_visual(&b, &proj, Some(&zb), &PositionEmbedding::None).unwrap();
        for i in 0..8 {
            let with = ea.data()[i] - eb.data()[i];
            let without = na.data()[i] - nb.data()[i];
            assert!((with - without).abs() < 1e-9);
        }
    }

    #[test]
    fn stem_quarters_resolution() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let c1 = Tensor::new(trunc_normal(&mut rng, 32 * 3 * 9, 0.1), &[32, 3, 3, 3]).unwrap();
        let c2 = Tensor::new(trunc_normal(&mut rng, 16 * 32 * 9, 0.1), &[16, 32, 3, 3]).unwrap();
        let b1 = Tensor::<f64>::zeros(&[32]).unwrap();
        let b2 = Tensor::<f64>::zeros(&[16]).unwrap();
        let w = StemWeights { conv1: &c1, bias1: &b1, conv2: &c2, bias2: &b2 };
        let zero = Tensor::<f64>::zeros(&[3, 32, 24]).unwrap();
        let f = conv_stem(&zero, &w).unwrap();
        assert_eq!(f.shape(), &[16, 8, 6]);
        assert!(f.data().iter().all(|&v| v == 0.0));
        let bad = Tensor::<f64>::zeros(&[3, 30, 24]).unwrap();
        assert!(matches!(conv_stem(&bad, &w), Err(TokenizerError::NonDivisible { .. })));
    }

    #[test]
    fn assemble_puts_keypoints_first() {
        let kp = KeypointTokenTable::new(Tensor::new(seq(17 * 4), &[17, 4]).unwrap());
        let vis = Tensor::<f64>::full(&[2, 9, 4], -1.0).unwrap();
        let s = assemble(&kp, &vis).unwrap();
        assert_eq!(s.tokens.shape(), &[2, 26, 4]);
        assert_eq!((s.n_keypoint, s.n_visual), (17, 9));
        for b in 0..2 {
            let off = b * 26 * 4;
            assert_eq!(&s.tokens.data()[off..off + 68], kp.embeddings.data());
        }
        let bad = Tensor::<f64>::zeros(&[9, 5]).unwrap();
        assert!(assemble(&kp, &bad).is_err());
    }

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let v = trunc_normal(&mut rng, 10_000, 0.02);
        assert!(v.iter().all(|x| x.abs() <= 0.04));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn unpatchify_inverts_patchify(c in 1usize..4, gh in 1usize..4, gw in 1usize..4, ph in 1usize..4, pw in 1usize..4) {
                let (h, w) = (gh * ph, gw * pw);
                let img = Tensor::new(seq(c * h * w), &[c, h, w]).unwrap();
                let p = patchify(&img, ph, pw).unwrap();
                prop_assert_eq!(p.shape(), &[gh * gw, ph * pw * c][..]);
                let back = unpatchify(&p, (gh, gw), ph, pw).unwrap();
                prop_assert_eq!(back.data(), img.data());
            }

            #[test]
            fn no_pe_embedding_commutes_with_row_permutation(seed in 0u64..500) {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let l = 6;
                let x = trunc_normal(&mut rng, l * 5, 1.0);
                let proj = Tensor::new(trunc_normal(&mut rng, 5 * 4, 1.0), &[5, 4]).unwrap();
                let bias = Tensor::new(trunc_normal(&mut rng, 4, 1.0), &[4]).unwrap();
                let mut perm: Vec<usize> = (0..l).collect();
                use rand::seq::SliceRandom;
                perm.shuffle(&mut rng);
                let px: Vec<f64> = perm.iter().flat_map(|&i| x[i * 5..(i + 1) * 5].to_vec()).collect();
                let a = embed_visual(&Tensor::new(x, &[l, 5]).unwrap(), &proj, Some(&bias), &PositionEmbedding::None).unwrap();
                let b = embed_visual(&Tensor::new(px, &[l, 5]).unwrap(), &proj, Some(&bias), &PositionEmbedding::None).unwrap();
                for (r, &src) in perm.iter().enumerate() {
                    prop_assert_eq!(&b.data()[r * 4..(r + 1) * 4], &a.data()[src * 4..(src + 1) * 4]);
                }
            }
        }
    }
}
