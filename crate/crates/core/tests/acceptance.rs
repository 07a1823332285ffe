//! Acceptance criteria A1-A10. Runs as a plain binary (no libtest harness) so
//! every criterion prints exactly one PASS/FAIL line; exits non-zero if any
//! criterion fails.
//!
//! The training criteria (A3, A4, A8, A9) run real training on the CPU and
//! take most of the wall time.

#[path = "common/ap_oracle.rs"]
mod ap_oracle;
#[path = "common/gradcheck.rs"]
mod gradcheck;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokenpose::data::SynthConfig;
use tokenpose::encoder::{
    fuse_keypoint_tokens, multi_head_attention, run_encoder, BlockWeights, EncoderOptions, MsaWeights,
};
use tokenpose::heatmap::{decode_map, gaussian_target, head_forward, mse_loss, DecodeMode};
use tokenpose::metrics::{average_precision, oks};
use tokenpose::model::{count_params, init_params};
use tokenpose::params::Bound;
use tokenpose::tensor::{concat, conv2d};
use tokenpose::tokenizer::{assemble, embed_visual, patchify, KeypointTokenTable, PositionEmbedding};
use tokenpose::train::{Checkpoint, DataSource, TrainConfig, Trainer};
use tokenpose::{ModelConfig, PeMode, Tensor};

use gradcheck::{check, uniform, weighted_sum};

// Pinned tolerances and budgets.
const A1_REL_ERR: f64 = 1e-4;
const A1_RUNTIME: Duration = Duration::from_secs(60);
const A2_INPUTS: usize = 100;
const A2_TOL: f64 = 1e-6;
const A3_SAMPLES: usize = 32;
const A3_MAX_STEPS: u64 = 2000;
const A3_BOUND_PX: f64 = 2.0;
const A3_RUNTIME: Duration = Duration::from_secs(15 * 60);
const A3_EVAL_EVERY: u64 = 50;
const A4_TRAIN: usize = 512;
const A4_VAL: usize = 64;
const A4_MAX_STEPS: u64 = 10_000;
const A4_PCKH: f64 = 0.90;
const A5_PAPER_PARAMS: f64 = 5.8e6;
const A5_REL: f64 = 0.10;
const A6_COUNT: usize = 1000;
const A6_SIGMA: f64 = 2.0;
const A6_SUBPIXEL: f64 = 0.05;
const A6_ARGMAX: f64 = 0.71;
const A7_SETS: u64 = 50;
const A7_SPOT_TOL: f64 = 1e-9;
const A8_SEEDS: [u64; 3] = [0, 1, 2];
const A8_NONE_GAP: f64 = 0.05;
const A10_STEPS: u64 = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- A1

fn a1_gradients() -> Outcome {
    let start = Instant::now();
    type Case = (&'static str, Vec<(Vec<f64>, Vec<usize>)>, Box<dyn Fn(&[Tensor<f64>]) -> Tensor<f64>>);
    let u = |seed: u64, shape: &[usize]| (uniform(seed, shape.iter().product()), shape.to_vec());
    let mut cases: Vec<Case> = vec![
        ("matmul", vec![u(1, &[3, 4]), u(2, &[4, 5])], Box::new(|x| weighted_sum(&x[0].matmul(&x[1]).unwrap(), 101))),
        ("matmul_batched", vec![u(3, &[2, 3, 4]), u(4, &[2, 4, 2])], Box::new(|x| weighted_sum(&x[0].matmul(&x[1]).unwrap(), 102))),
        ("matmul_broadcast", vec![u(5, &[2, 3, 4]), u(6, &[4, 3])], Box::new(|x| weighted_sum(&x[0].matmul(&x[1]).unwrap(), 103))),
        ("transpose_last2", vec![u(7, &[2, 3, 4])], Box::new(|x| weighted_sum(&x[0].transpose_last2().unwrap(), 104))),
        ("permute", vec![u(8, &[2, 3, 4])], Box::new(|x| weighted_sum(&x[0].permute(&[1, 2, 0]).unwrap(), 105))),
        ("reshape", vec![u(9, &[2, 6])], Box::new(|x| weighted_sum(&x[0].reshape(&[3, 4]).unwrap(), 106))),
        ("add", vec![u(10, &[2, 3]), u(11, &[3])], Box::new(|x| weighted_sum(&x[0].add(&x[1]).unwrap(), 107))),
        ("sub", vec![u(12, &[2, 3]), u(13, &[2, 3])], Box::new(|x| weighted_sum(&x[0].sub(&x[1]).unwrap(), 108))),
        ("mul", vec![u(14, &[2, 3]), u(15, &[3])], Box::new(|x| weighted_sum(&x[0].mul(&x[1]).unwrap(), 109))),
        ("scale", vec![u(16, &[5])], Box::new(|x| weighted_sum(&x[0].scale(-1.3), 110))),
        ("square", vec![u(17, &[5])], Box::new(|x| weighted_sum(&x[0].square(), 111))),
        ("sum", vec![u(18, &[2, 3])], Box::new(|x| x[0].sum().square())),
        ("mean", vec![u(19, &[2, 3])], Box::new(|x| x[0].mean().square())),
        ("softmax", vec![u(20, &[3, 5])], Box::new(|x| weighted_sum(&x[0].softmax_lastdim(), 112))),
        ("layer_norm", vec![u(21, &[3, 6]), u(22, &[6]), u(23, &[6])], Box::new(|x| weighted_sum(&x[0].layer_norm(&x[1], &x[2], 1e-6).unwrap(), 113))),
        ("gelu", vec![(uniform(24, 12).iter().map(|v| 3.0 * v).collect(), vec![12])], Box::new(|x| weighted_sum(&x[0].gelu(), 114))),
        ("narrow", vec![u(25, &[4, 3])], Box::new(|x| weighted_sum(&x[0].narrow(0, 1, 2).unwrap(), 115))),
        ("concat", vec![u(26, &[2, 3]), u(27, &[1, 3])], Box::new(|x| weighted_sum(&concat(&[&x[0], &x[1]], 0).unwrap(), 116))),
        ("expand_front", vec![u(28, &[2, 3])], Box::new(|x| weighted_sum(&x[0].expand_front(3).unwrap(), 117))),
        ("conv2d", vec![u(29, &[1, 2, 5, 5]), u(30, &[3, 2, 3, 3]), u(31, &[3])], Box::new(|x| weighted_sum(&conv2d(&x[0], &x[1], Some(&x[2]), 2, 1).unwrap(), 118))),
        ("patchify", vec![u(32, &[2, 4, 6])], Box::new(|x| weighted_sum(&patchify(&x[0], 2, 3).unwrap(), 119))),
        ("embed_visual", vec![u(33, &[4, 6]), u(34, &[6, 5]), u(35, &[5]), u(36, &[4, 5])], Box::new(|x| {
            let pe = PositionEmbedding::Table(x[3].clone());
            weighted_sum(&embed_visual(&x[0], &x[1], Some(&x[2]), &pe).unwrap(), 120)
        })),
        ("head_forward", vec![u(37, &[3, 4]), u(38, &[4, 6]), u(39, &[6])], Box::new(|x| weighted_sum(&head_forward(&x[0], &x[1], Some(&x[2]), 2, 3).unwrap(), 121))),
        ("mse_loss", vec![u(40, &[2, 2, 3]), u(41, &[2, 2, 3])], Box::new(|x| mse_loss(&x[0], &x[1], &[true, false]).unwrap())),
        ("msa", vec![u(42, &[5, 4]), u(43, &[4, 4]), u(44, &[4, 4]), u(45, &[4, 4]), u(46, &[4, 4]), u(47, &[4])], Box::new(|x| {
            let w = MsaWeights { wq: &x[1], wk: &x[2], wv: &x[3], wp: &x[4], bp: Some(&x[5]) };
            weighted_sum(&multi_head_attention(&x[0], 2, &w, &mut None).unwrap().0, 122)
        })),
    ];

    // full encoder: 2 keypoint + 4 visual tokens, d=8, 2 heads, 2 layers
    let (d, hidden) = (8, 16);
    let block_shapes = |_: usize| -> Vec<Vec<usize>> {
        vec![vec![d], vec![d], vec![d, d], vec![d, d], vec![d, d], vec![d, d], vec![d], vec![d], vec![d], vec![d, hidden], vec![hidden], vec![hidden, d], vec![d]]
    };
    let mut inputs = vec![u(60, &[2, d]), u(61, &[4, d])];
    for l in 0..2 {
        for (i, s) in block_shapes(l).into_iter().enumerate() {
            let n: usize = s.iter().product();
            let mut v: Vec<f64> = uniform(70 + 20 * l as u64 + i as u64, n).iter().map(|x| 0.5 * x).collect();
            if i == 0 || i == 7 {
                v.iter_mut().for_each(|x| *x += 1.0);
            }
            inputs.push((v, s));
        }
    }
    cases.push(("encoder_2layer", inputs, Box::new(|x| {
        let seq = assemble(&KeypointTokenTable::new(x[0].clone()), &x[1]).unwrap();
        let blocks: Vec<BlockWeights<'_, f64>> = (0..2).map(|l| block_weights(&x[2 + 13 * l..2 + 13 * (l + 1)])).collect();
        weighted_sum(run_encoder(&seq, 2, &blocks, EncoderOptions::default(), &mut None).unwrap().output(), 123)
    })));

    let mut worst = (0.0f64, "");
    let mut checked = 0;
    for (name, inputs, f) in &cases {
        let r = check(inputs, f);
        checked += r.checked;
        if r.max_rel_err > worst.0 {
            worst = (r.max_rel_err, name);
        }
    }
    let took = start.elapsed();
    outcome(
        worst.0 < A1_REL_ERR && took < A1_RUNTIME,
        format!("{} cases, {checked} elements, max rel err {:.2e} ({}), {:.1}s", cases.len(), worst.0, worst.1, took.as_secs_f64()),
    )
}

fn block_weights<T: tokenpose::Scalar>(x: &[Tensor<T>]) -> BlockWeights<'_, T> {
    BlockWeights {
        ln1_gamma: &x[0],
        ln1_beta: &x[1],
        msa: MsaWeights { wq: &x[2], wk: &x[3], wv: &x[4], wp: &x[5], bp: Some(&x[6]) },
        ln2_gamma: &x[7],
        ln2_beta: &x[8],
        fc1: &x[9],
        fc1_bias: &x[10],
        fc2: &x[11],
        fc2_bias: &x[12],
    }
}

/// Block weights of layer `l` out of a bound parameter store.
fn bound_blocks<T: tokenpose::Scalar>(store: &tokenpose::ParamStore<T>, bound: &Bound<T>, layers: usize) -> Vec<Vec<Tensor<T>>> {
    let suffixes = [
        "norm1.weight", "norm1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.proj.weight", "attn.proj.bias",
        "norm2.weight", "norm2.bias", "mlp.fc1.weight", "mlp.fc1.bias", "mlp.fc2.weight", "mlp.fc2.bias",
    ];
    (0..layers)
        .map(|l| suffixes.iter().map(|s| bound.get(store.id(&format!("blocks.{l}.{s}")).unwrap()).clone()).collect())
        .collect()
}

// ---------------------------------------------------------------- A2

struct Invariance {
    row_dev: f64,
    kp_dev: f64,
    vis_dev: f64,
    bitwise: bool,
}

fn attention_invariance<T: tokenpose::Scalar>() -> Invariance {
    let mut cfg = ModelConfig::toy();
    cfg.pe_mode = PeMode::None;
    let store = init_params::<f32>(&cfg, 11).unwrap().cast::<T>();
    let bound = store.bind(false).unwrap();
    let owned = bound_blocks(&store, &bound, cfg.num_layers);
    let blocks: Vec<_> = owned.iter().map(|b| block_weights(b)).collect();
    let kp = KeypointTokenTable::new(bound.get(store.id("keypoint_tokens").unwrap()).clone());
    let (n, l, d) = (cfg.num_keypoints, cfg.num_visual(), cfg.embed_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut r = Invariance { row_dev: 0.0, kp_dev: 0.0, vis_dev: 0.0, bitwise: true };
    for _ in 0..A2_INPUTS {
        let vis: Vec<T> = (0..l * d).map(|_| T::from_f64(rng.random_range(-2.0..2.0))).collect();
        let mut perm: Vec<usize> = (0..l).collect();
        for i in (1..l).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pvis: Vec<T> = perm.iter().flat_map(|&i| vis[i * d..(i + 1) * d].to_vec()).collect();
        let run = |v: Vec<T>| {
            let seq = assemble(&kp, &Tensor::new(v, &[l, d]).unwrap()).unwrap();
            run_encoder(&seq, cfg.num_heads, &blocks, EncoderOptions { record_attention: true }, &mut None).unwrap()
        };
        let (a, b) = (run(vis), run(pvis));
        for rec in &a.attention {
            for i in 0..rec.size {
                r.row_dev = r.row_dev.max((rec.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
        for layer in 1..=cfg.num_layers {
            let (x, y) = (a.layers[layer].data(), b.layers[layer].data());
            for i in 0..n * d {
                r.kp_dev = r.kp_dev.max((x[i].as_f64() - y[i].as_f64()).abs());
            }
            for (row, &src) in perm.iter().enumerate() {
                for c in 0..d {
                    let (p, q) = (y[(n + row) * d + c].as_f64(), x[(n + src) * d + c].as_f64());
                    r.bitwise &= p.to_bits() == q.to_bits();
                    r.vis_dev = r.vis_dev.max((p - q).abs());
                }
            }
        }
    }
    r
}

fn a2_attention_invariants() -> Outcome {
    let r = attention_invariance::<f64>();
    let s = attention_invariance::<f32>();
    outcome(
        r.row_dev <= A2_TOL && r.kp_dev <= A2_TOL && r.vis_dev <= A2_TOL,
        format!(
            "{A2_INPUTS} inputs (f64): max |row sum - 1| {:.1e}, keypoint drift {:.1e}, visual permutation error {:.1e} ({}); f32 for reference: {:.1e} / {:.1e} / {:.1e}",
            r.row_dev,
            r.kp_dev,
            r.vis_dev,
            if r.bitwise { "bitwise" } else { "not bitwise, summation order differs" },
            s.row_dev,
            s.kp_dev,
            s.vis_dev
        ),
    )
}

// ---------------------------------------------------------------- A3 / A9

fn synthetic(seed: u64, count: usize) -> DataSource {
    DataSource::Synthetic { seed, count, template: "stick8".into(), render: SynthConfig::default() }
}

/// Desk-scale schedule stretched over `epochs`: drops at 2/3 and 87%.
fn schedule(cfg: &mut TrainConfig, epochs: usize) {
    cfg.epochs = epochs;
    cfg.lr_drop_epochs = vec![epochs * 2 / 3, epochs * 87 / 100];
}

/// Overfit protocol; returns (steps taken, final training error, time).
fn overfit(model: ModelConfig) -> (u64, f64, Duration) {
    let mut cfg = TrainConfig { model, seed: 3, train_data: synthetic(31, A3_SAMPLES), val_data: None, ..TrainConfig::default() };
    let spe = A3_SAMPLES.div_ceil(cfg.batch_size) as u64;
    schedule(&mut cfg, (A3_MAX_STEPS / spe) as usize);
    let start = Instant::now();
    let mut t = Trainer::new(cfg).unwrap();
    let mut err = f64::INFINITY;
    while t.step() < A3_MAX_STEPS {
        t.train_step().unwrap();
        if t.step() % A3_EVAL_EVERY == 0 {
            err = t.evaluate(&t.train).unwrap().mean_error;
            if err < A3_BOUND_PX {
                break;
            }
        }
    }
    (t.step(), err, start.elapsed())
}

fn a3_overfit() -> Outcome {
    let (steps, err, took) = overfit(ModelConfig::toy());
    outcome(
        err < A3_BOUND_PX && took < A3_RUNTIME,
        format!("train error {err:.2} px after {steps} steps (bound {A3_BOUND_PX} px in {A3_MAX_STEPS}), {:.0}s", took.as_secs_f64()),
    )
}

fn a9_fusion() -> Outcome {
    let mut cfg = ModelConfig::toy();
    cfg.num_layers = 12;
    cfg.embed_dim = 16;
    cfg.num_heads = 2;
    let store = init_params::<f32>(&cfg, 5).unwrap();
    let bound = store.bind(false).unwrap();
    let owned = bound_blocks(&store, &bound, 12);
    let blocks: Vec<_> = owned.iter().map(|b| block_weights(b)).collect();
    let kp = KeypointTokenTable::new(bound.get(store.id("keypoint_tokens").unwrap()).clone());
    let vis = Tensor::new(uniform(9, cfg.num_visual() * 16).iter().map(|&v| v as f32).collect(), &[cfg.num_visual(), 16]).unwrap();
    let st = run_encoder(&assemble(&kp, &vis).unwrap(), 2, &blocks, EncoderOptions::default(), &mut None).unwrap();
    let fused = fuse_keypoint_tokens(&st, &[4, 8, 12]).unwrap();
    let (n, d) = (cfg.num_keypoints, 16);
    let width_ok = fused.shape() == [n, 3 * d];
    let mut segments_ok = true;
    for (j, &l) in [4usize, 8, 12].iter().enumerate() {
        let rows = st.layers[l].data();
        for i in 0..n {
            for c in 0..d {
                segments_ok &= fused.data()[i * 3 * d + j * d + c].to_bits() == rows[i * d + c].to_bits();
            }
        }
    }
    let mut toy = ModelConfig::toy();
    toy.fusion_layers = Some(vec![2, 3, 4]);
    let (steps, err, took) = overfit(toy);
    outcome(
        width_ok && segments_ok && err < A3_BOUND_PX && took < A3_RUNTIME,
        format!(
            "fused width {} (3d = {}), segments bitwise: {segments_ok}; overfit with layers [2,3,4]: {err:.2} px after {steps} steps, {:.0}s",
            fused.shape()[1],
            3 * d,
            took.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- A4 / A8

struct GeneralizationRun {
    pe: PeMode,
    seed: u64,
    steps: u64,
    pckh: f64,
    first_above: Option<u64>,
}

/// Default desk-scale recipe (30 epochs, drops at 20 and 26) on 512/64
/// seed-disjoint synthetic samples; validation after every epoch.
fn generalization(pe: PeMode, seed: u64) -> GeneralizationRun {
    let mut cfg = TrainConfig {
        seed,
        train_data: synthetic(1000 + seed, A4_TRAIN),
        val_data: Some(synthetic(2000 + seed, A4_VAL)),
        ..TrainConfig::default()
    };
    cfg.model.pe_mode = pe;
    let mut t = Trainer::new(cfg).unwrap();
    let mut first_above = None;
    let mut pckh = 0.0;
    while t.epoch() < t.cfg.epochs && t.step() < A4_MAX_STEPS {
        t.run_epoch().unwrap();
        pckh = t.evaluate(t.val.as_ref().unwrap()).unwrap().pckh.unwrap();
        if pckh > A4_PCKH && first_above.is_none() {
            first_above = Some(t.step());
        }
    }
    eprintln!("  [{pe:?} seed {seed}] val PCKh@0.5 {:.1}% after {} steps", 100.0 * pckh, t.step());
    GeneralizationRun { pe, seed, steps: t.step(), pckh, first_above }
}

fn a4_generalization(runs: &[GeneralizationRun]) -> Outcome {
    let r = runs.iter().find(|r| r.pe == PeMode::Sine2d && r.seed == A8_SEEDS[0]).unwrap();
    outcome(
        r.pckh > A4_PCKH && r.steps <= A4_MAX_STEPS,
        format!(
            "val PCKh@0.5 {:.1}% after {} steps (first above {:.0}% at step {})",
            100.0 * r.pckh,
            r.steps,
            100.0 * A4_PCKH,
            r.first_above.map_or("never".into(), |s| s.to_string())
        ),
    )
}

fn a8_position_ablation(runs: &[GeneralizationRun]) -> Outcome {
    let mean = |pe: PeMode| {
        let v: Vec<f64> = runs.iter().filter(|r| r.pe == pe).map(|r| r.pckh).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (sine, learn, none) = (mean(PeMode::Sine2d), mean(PeMode::Learnable), mean(PeMode::None));
    outcome(
        sine >= learn && learn > none && learn - none >= A8_NONE_GAP,
        format!(
            "mean val PCKh over {} seeds: sine2d {:.1}%, learnable {:.1}%, none {:.1}% (none trails by {:.1} points, need >= {:.0})",
            A8_SEEDS.len(),
            100.0 * sine,
            100.0 * learn,
            100.0 * none,
            100.0 * (learn - none),
            100.0 * A8_NONE_GAP
        ),
    )
}

// ---------------------------------------------------------------- A5 / A6 / A7

fn a5_param_count() -> Outcome {
    let n = count_params(&ModelConfig::tokenpose_t());
    let rel = (n as f64 - A5_PAPER_PARAMS) / A5_PAPER_PARAMS;
    outcome(rel.abs() <= A5_REL, format!("TokenPose-T: {n} parameters vs 5.8M ({:+.1}%)", 100.0 * rel))
}

fn a6_decoder() -> Outcome {
    let (h, w) = (64, 48);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut sub, mut arg) = (0.0f64, 0.0f64);
    for _ in 0..A6_COUNT {
        let c = (rng.random_range(8.0..(w - 8) as f64), rng.random_range(8.0..(h - 8) as f64));
        let map = gaussian_target(c, A6_SIGMA, h, w);
        let (x, y, _) = decode_map(&map, h, w, DecodeMode::Subpixel);
        sub = sub.max(((x - c.0).powi(2) + (y - c.1).powi(2)).sqrt());
        let (x, y, _) = decode_map(&map, h, w, DecodeMode::Argmax);
        arg = arg.max(((x - c.0).powi(2) + (y - c.1).powi(2)).sqrt());
    }
    outcome(
        sub < A6_SUBPIXEL && arg < A6_ARGMAX,
        format!("{A6_COUNT} Gaussians: subpixel max error {sub:.2e} px (< {A6_SUBPIXEL}), argmax {arg:.3} px (< {A6_ARGMAX})"),
    )
}

fn a7_metric_oracle() -> Outcome {
    let mut exact = 0;
    for seed in 0..A7_SETS {
        let (images, k) = ap_oracle::micro_set(seed);
        let want = ap_oracle::oracle_report(&images, &k);
        match average_precision(&images, &k) {
            Ok(got) if got == want => exact += 1,
            Ok(got) => eprintln!("  micro-set {seed}: {got:?} vs oracle {want:?}"),
            Err(e) => eprintln!("  micro-set {seed}: {e}"),
        }
    }
    use tokenpose::data::Keypoint;
    let kp = |x, y| Keypoint { x, y, v: 2.0 };
    // d² = 2 = 2·s²·k² with s = 2, k = 0.5
    let e1 = oks(&[(1.0, 1.0)], &[kp(0.0, 0.0)], 2.0, &[0.5]).unwrap();
    let mixed = oks(&[(0.0, 0.0), (3.0, 4.0)], &[kp(0.0, 0.0), kp(0.0, 0.0)], 5.0, &[0.3, 0.2]).unwrap();
    // joint 2: d² = 25, 2·25·0.04 = 2 -> e^{-12.5}
    let mixed_want = (1.0 + (-12.5f64).exp()) / 2.0;
    let unlabeled = oks(&[(1.0, 1.0), (90.0, 90.0)], &[kp(0.0, 0.0), Keypoint { x: 0.0, y: 0.0, v: 0.0 }], 2.0, &[0.5, 0.5]).unwrap();
    let spot = [(e1, (-1.0f64).exp()), (mixed, mixed_want), (unlabeled, (-1.0f64).exp())];
    let spot_err = spot.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    outcome(
        exact == A7_SETS && spot_err < A7_SPOT_TOL,
        format!("{exact}/{A7_SETS} micro-sets identical to the brute-force oracle; OKS spot values max error {spot_err:.1e}"),
    )
}

// ---------------------------------------------------------------- A10

fn a10_determinism() -> Outcome {
    let cfg = TrainConfig {
        batch_size: 4,
        seed: 9,
        dropout: 0.1,
        flip: true,
        train_data: synthetic(91, 10),
        val_data: None,
        ..TrainConfig::default()
    };
    let run = |steps: u64, parallel: bool| {
        tokenpose::par::set_parallel(parallel);
        let mut t = Trainer::new(cfg.clone()).unwrap();
        for _ in 0..steps {
            t.train_step().unwrap();
        }
        tokenpose::par::set_parallel(true);
        t
    };
    let a = run(2 * A10_STEPS, true).checkpoint().unwrap().encode();
    let b = run(2 * A10_STEPS, true).checkpoint().unwrap().encode();
    let seq = run(2 * A10_STEPS, false).checkpoint().unwrap().encode();
    let repeat = a == b;
    let modes = a == seq;

    let decoded = Checkpoint::decode(&a).unwrap();
    let roundtrip = decoded.encode() == a;

    let half = run(A10_STEPS, true).checkpoint().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.tkpz");
    half.save(&path).unwrap();
    let mut resumed = Trainer::resume(&Checkpoint::load(&path).unwrap()).unwrap();
    for _ in 0..A10_STEPS {
        resumed.train_step().unwrap();
    }
    let resume = resumed.checkpoint().unwrap().encode() == a;
    outcome(
        repeat && roundtrip && resume && modes,
        format!(
            "repeat runs identical: {repeat}; parallel == sequential: {modes}; round-trip lossless: {roundtrip}; resume at step {A10_STEPS} + {A10_STEPS} == continuous: {resume} ({} byte checkpoint)",
            a.len()
        ),
    )
}

fn main() -> ExitCode {
    // `cargo test` passes libtest flags; a filter argument that names no
    // criterion (e.g. `cargo test foo`) skips the suite.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    if let Some(f) = &filter {
        if !f.to_ascii_uppercase().starts_with('A') || f.len() > 3 {
            return ExitCode::SUCCESS;
        }
    }
    let wanted = |id: &str| filter.as_deref().is_none_or(|f| f.eq_ignore_ascii_case(id));
    let mut failed = 0;
    let mut report = |id: &str, name: &str, o: Outcome| {
        println!("{id} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    };
    let criteria: [(&str, &str, fn() -> Outcome); 6] = [
        ("A1", "gradient suite", a1_gradients),
        ("A2", "attention invariants", a2_attention_invariants),
        ("A5", "parameter count", a5_param_count),
        ("A6", "decoder accuracy", a6_decoder),
        ("A7", "metric oracle equivalence", a7_metric_oracle),
        ("A10", "determinism and persistence", a10_determinism),
    ];
    for (id, name, f) in criteria {
        if wanted(id) {
            report(id, name, f());
        }
    }
    if wanted("A3") {
        report("A3", "overfit smoke test", a3_overfit());
    }
    if wanted("A9") {
        report("A9", "fusion mechanics", a9_fusion());
    }
    if wanted("A4") || wanted("A8") {
        let seeds: &[u64] = if wanted("A8") { &A8_SEEDS } else { &A8_SEEDS[..1] };
        let modes: &[PeMode] = if wanted("A8") { &[PeMode::Sine2d, PeMode::Learnable, PeMode::None] } else { &[PeMode::Sine2d] };
        let runs: Vec<GeneralizationRun> =
            seeds.iter().flat_map(|&s| modes.iter().map(move |&pe| generalization(pe, s))).collect();
        if wanted("A4") {
            report("A4", "generalization smoke test", a4_generalization(&runs));
        }
        if wanted("A8") {
            report("A8", "position-embedding ablation", a8_position_ablation(&runs));
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
