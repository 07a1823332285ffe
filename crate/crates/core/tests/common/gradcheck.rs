//! Central finite-difference oracle for reverse-mode gradients.
//!
//! Kept independent of the backward rules: it only ever evaluates forward
//! passes on constant (non-differentiable) inputs.

#![allow(dead_code)]

use tokenpose::Tensor;

pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare analytic gradients of the scalar `f(inputs)` against central
/// differences for every element of every input.
pub fn check<F>(inputs: &[(Vec<f64>, Vec<usize>)], f: F) -> GradReport
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(d, s)| Tensor::param(d.clone(), s).unwrap())
        .collect();
    let loss = f(&leaves);
    loss.backward().unwrap();
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|t| t.grad_or_zeros()).collect();

    let eval = |values: &[Vec<f64>]| -> f64 {
        let consts: Vec<Tensor<f64>> = values
            .iter()
            .zip(inputs)
            .map(|(d, (_, s))| Tensor::new(d.clone(), s).unwrap())
            .collect();
        f(&consts).item()
    };
    let mut values: Vec<Vec<f64>> = inputs.iter().map(|(d, _)| d.clone()).collect();
    let mut report = GradReport { max_rel_err: 0.0, worst: (0, 0), checked: 0 };
    for t in 0..inputs.len() {
        for i in 0..values[t].len() {
            let orig = values[t][i];
            values[t][i] = orig + STEP;
            let up = eval(&values);
            values[t][i] = orig - STEP;
            let down = eval(&values);
            values[t][i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let e = rel_err(analytic[t][i], numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (t, i);
            }
            report.checked += 1;
        }
    }
    report
}

/// Deterministic pseudo-random values in [-1, 1) (SplitMix64).
pub fn uniform(seed: u64, n: usize) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    (0..n)
        .map(|_| {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

/// `sum(out * w)` with fixed random weights, so every output element
/// contributes a distinct amount to the scalar.
pub fn weighted_sum(out: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let w = Tensor::new(uniform(seed, out.numel()), out.shape()).unwrap();
    out.mul(&w).unwrap().sum()
}
