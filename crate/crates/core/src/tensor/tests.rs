use super::*;

#[path = "../../tests/common/gradcheck.rs"]
mod gradcheck;

use gradcheck::{check, uniform, weighted_sum};

fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    Tensor::new(data.to_vec(), shape).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_examples() {
    let a = t(&[1., 2., 3., 4.], &[2, 2]);
    let eye = Tensor::<f64>::eye(2).unwrap();
    assert_eq!(eye.matmul(&a).unwrap().data(), a.data());
    let b = t(&[5., 6., 7., 8.], &[2, 2]);
    assert_eq!(a.matmul(&b).unwrap().data(), &[19., 22., 43., 50.]);
    let z = Tensor::<f64>::zeros(&[2, 3]).unwrap();
    let any = t(&uniform(3, 12), &[3, 4]);
    let out = z.matmul(&any).unwrap();
    assert_eq!(out.shape(), &[2, 4]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_errors_name_both_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]).unwrap();
    let b = Tensor::<f64>::zeros(&[2, 3]).unwrap();
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    let c = Tensor::<f64>::zeros(&[2, 2, 3]).unwrap();
    let d = Tensor::<f64>::zeros(&[3, 3, 4]).unwrap();
    assert!(matches!(c.matmul(&d), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn batched_matmul_broadcasts_against_per_batch_products() {
    let a = t(&uniform(1, 2 * 3 * 4), &[2, 3, 4]);
    let b = t(&uniform(2, 4 * 5), &[1, 4, 5]);
    let out = a.matmul(&b).unwrap();
    assert_eq!(out.shape(), &[2, 3, 5]);
    for i in 0..2 {
        let ai = t(&a.data()[i * 12..(i + 1) * 12], &[3, 4]);
        let bi = t(b.data(), &[4, 5]);
        let r = ai.matmul(&bi).unwrap();
        assert!(close(&out.data()[i * 15..(i + 1) * 15], r.data(), 1e-14));
    }
}

#[test]
fn softmax_examples() {
    let u = t(&[0., 0., 0., 0.], &[4]).softmax_lastdim();
    assert!(close(u.data(), &[0.25; 4], 1e-15));
    let x = uniform(9, 12);
    let shifted: Vec<f64> = x.iter().map(|v| v + 37.5).collect();
    let a = t(&x, &[3, 4]).softmax_lastdim();
    let b = t(&shifted, &[3, 4]).softmax_lastdim();
    assert!(close(a.data(), b.data(), 1e-9));
    for row in a.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let s = t(&[1., 2., 3.], &[3]).softmax_lastdim();
    assert!(close(s.data(), &[0.09003, 0.24473, 0.66524], 1e-5));
}

#[test]
fn layer_norm_examples() {
    let ones = t(&[1., 1., 1.], &[3]);
    let zeros = t(&[0., 0., 0.], &[3]);
    let c = t(&[5., 5., 5.], &[1, 3]).layer_norm(&ones, &zeros, 1e-6).unwrap();
    assert!(close(c.data(), &[0., 0., 0.], 1e-12));
    let beta = t(&[0.5, -1., 2.], &[3]);
    let g0 = t(&uniform(4, 6), &[2, 3]).layer_norm(&zeros, &beta, 1e-6).unwrap();
    assert!(close(g0.data(), &[0.5, -1., 2., 0.5, -1., 2.], 0.0));
    let r = t(&[1., 2., 3.], &[3]).layer_norm(&ones, &zeros, 1e-14).unwrap();
    assert!(close(r.data(), &[-1.22474, 0., 1.22474], 1e-5));
    let bad = Tensor::<f64>::zeros(&[2]).unwrap();
    assert!(t(&[1., 2., 3.], &[3]).layer_norm(&bad, &zeros, 1e-6).is_err());
}

#[test]
fn gelu_examples() {
    let g = t(&[0., 10., 1.], &[3]).gelu();
    assert_eq!(g.data()[0], 0.0);
    assert!((g.data()[1] - 10.0).abs() < 1e-9);
    assert!((g.data()[2] - 0.841345).abs() < 1e-6);
}

#[test]
fn conv2d_examples() {
    let x = t(&uniform(5, 2 * 3 * 4 * 5), &[2, 3, 4, 5]);
    // identity 1x1 kernel on a single channel
    let x1 = t(&uniform(6, 16), &[1, 1, 4, 4]);
    let id = t(&[1.], &[1, 1, 1, 1]);
    assert_eq!(conv2d(&x1, &id, None, 1, 0).unwrap().data(), x1.data());
    let img = t(&[1., 2., 3., 4.], &[1, 1, 2, 2]);
    let ones = t(&[1., 1., 1., 1.], &[1, 1, 2, 2]);
    let s = conv2d(&img, &ones, None, 1, 0).unwrap();
    assert_eq!(s.shape(), &[1, 1, 1, 1]);
    assert_eq!(s.data(), &[10.]);
    let zk = Tensor::<f64>::zeros(&[2, 3, 3, 3]).unwrap();
    let z = conv2d(&x, &zk, None, 2, 1).unwrap();
    assert_eq!(z.shape(), &[2, 2, 2, 3]);
    assert!(z.data().iter().all(|&v| v == 0.0));
    assert!(matches!(conv2d(&x, &zk, None, 0, 1), Err(TensorError::InvalidStride(0))));
    assert_eq!(conv_out_dim(256, 3, 2, 1), Some(128));
}

#[test]
fn zero_sized_shapes_are_rejected() {
    assert!(Tensor::<f64>::zeros(&[0, 3]).is_err());
    assert!(Tensor::<f64>::new(vec![1., 2.], &[3]).is_err());
}

#[test]
fn backward_examples() {
    let x = Tensor::param(vec![1., 2., 3.], &[3]).unwrap();
    x.square().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2., 4., 6.]);

    let y = Tensor::param(vec![1., 2., 3.], &[3]).unwrap();
    let c = y.scale(0.0).sum();
    c.backward().unwrap();
    assert_eq!(y.grad().unwrap(), vec![0., 0., 0.]);

    let s = Tensor::param(uniform(7, 8), &[2, 4]).unwrap();
    s.softmax_lastdim().sum().backward().unwrap();
    assert!(s.grad().unwrap().iter().all(|g| g.abs() < 1e-12));

    let v = Tensor::param(vec![1., 2.], &[2]).unwrap();
    assert!(matches!(v.backward(), Err(TensorError::NotScalar(_))));
}

#[test]
fn disconnected_leaf_keeps_zero_grad() {
    let a = Tensor::param(vec![1., 2.], &[2]).unwrap();
    let b = Tensor::param(vec![3., 4.], &[2]).unwrap();
    let loss = a.square().sum();
    let missing = loss.backward_for(&[("a", &a), ("b", &b)]).unwrap();
    assert_eq!(missing, vec!["b".to_string()]);
    assert_eq!(b.grad_or_zeros(), vec![0., 0.]);
}

#[test]
fn graph_is_reverse_topological_and_visits_once() {
    let x = Tensor::param(uniform(8, 6), &[2, 3]).unwrap();
    let w = Tensor::param(uniform(9, 12), &[3, 4]).unwrap();
    let h = x.matmul(&w).unwrap();
    // `h` feeds two consumers
    let loss = h.gelu().add(&h.softmax_lastdim()).unwrap().sum();
    let g = Graph::from_root(&loss);
    assert!(g.is_reverse_topological());
    let mut ids = g.ids();
    let n = ids.len();
    ids.dedup();
    assert_eq!(ids.len(), n);
    assert_eq!(n, 7);
    loss.backward().unwrap();
    assert!(x.grad().is_some() && w.grad().is_some());
}

#[test]
fn finite_difference_every_op() {
    let tol = 1e-4;
    let cases: Vec<(&str, Vec<(Vec<f64>, Vec<usize>)>, Box<dyn Fn(&[Tensor<f64>]) -> Tensor<f64>>)> = vec![
        ("matmul", vec![(uniform(1, 6), vec![2, 3]), (uniform(2, 12), vec![3, 4])],
            Box::new(|x| weighted_sum(&x[0].matmul(&x[1]).unwrap(), 11))),
        ("matmul_batched", vec![(uniform(3, 24), vec![2, 3, 4]), (uniform(4, 40), vec![2, 4, 5])],
            Box::new(|x| weighted_sum(&x[0].matmul(&x[1]).unwrap(), 12))),
        ("matmul_bcast", vec![(uniform(5, 12), vec![3, 4]), (uniform(6, 40), vec![2, 4, 5])],
            Box::new(|x| weighted_sum(&x[0].matmul(&x[1]).unwrap(), 13))),
        ("softmax", vec![(uniform(7, 12), vec![3, 4])],
            Box::new(|x| weighted_sum(&x[0].softmax_lastdim(), 14))),
        ("layer_norm", vec![(uniform(8, 12), vec![3, 4]), (uniform(9, 4), vec![4]), (uniform(10, 4), vec![4])],
            Box::new(|x| weighted_sum(&x[0].layer_norm(&x[1], &x[2], 1e-6).unwrap(), 15))),
        ("gelu", vec![(uniform(11, 10).iter().map(|v| v * 3.0).collect(), vec![10])],
            Box::new(|x| weighted_sum(&x[0].gelu(), 16))),
        ("conv2d", vec![(uniform(12, 2 * 2 * 5 * 5), vec![2, 2, 5, 5]), (uniform(13, 3 * 2 * 3 * 3), vec![3, 2, 3, 3]), (uniform(14, 3), vec![3])],
            Box::new(|x| weighted_sum(&conv2d(&x[0], &x[1], Some(&x[2]), 2, 1).unwrap(), 17))),
        ("permute", vec![(uniform(15, 24), vec![2, 3, 4])],
            Box::new(|x| weighted_sum(&x[0].permute(&[2, 0, 1]).unwrap(), 18))),
        ("reshape", vec![(uniform(16, 24), vec![2, 3, 4])],
            Box::new(|x| weighted_sum(&x[0].reshape(&[6, 4]).unwrap(), 19))),
        ("add_sub_mul_bcast", vec![(uniform(17, 24), vec![2, 3, 4]), (uniform(18, 12), vec![3, 4])],
            Box::new(|x| {
                let a = x[0].add(&x[1]).unwrap();
                let b = x[1].sub(&x[0]).unwrap();
                weighted_sum(&a.mul(&b).unwrap().mul(&x[1]).unwrap(), 20)
            })),
        ("narrow_concat_expand", vec![(uniform(19, 12), vec![3, 4]), (uniform(20, 8), vec![2, 4])],
            Box::new(|x| {
                let e = x[1].expand_front(2).unwrap();
                let n = x[0].narrow(0, 1, 2).unwrap().expand_front(2).unwrap();
                weighted_sum(&concat(&[&e, &n], 2).unwrap(), 21)
            })),
        ("scale_mean_square", vec![(uniform(21, 6), vec![6])],
            Box::new(|x| x[0].scale(1.7).square().mean())),
    ];
    for (name, inputs, f) in cases {
        let report = check(&inputs, f);
        assert!(report.max_rel_err < tol, "{name}: {report:?}");
    }
}

#[test]
fn repeated_graphs_give_identical_gradients() {
    let run = || {
        let x = Tensor::param(uniform(30, 12), &[3, 4]).unwrap();
        let w = Tensor::param(uniform(31, 20), &[4, 5]).unwrap();
        let loss = weighted_sum(&x.matmul(&w).unwrap().gelu().softmax_lastdim(), 3);
        loss.backward().unwrap();
        (x.grad().unwrap(), w.grad().unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn parallel_and_sequential_kernels_agree_bitwise() {
    let run = || {
        let x = Tensor::param(uniform(40, 4 * 9 * 16), &[4, 9, 16]).unwrap();
        let w = Tensor::param(uniform(41, 16 * 16), &[16, 16]).unwrap();
        let h = x.matmul(&w).unwrap();
        let s = h.matmul(&h.transpose_last2().unwrap()).unwrap().softmax_lastdim();
        let loss = weighted_sum(&s.matmul(&h).unwrap().gelu(), 5);
        loss.backward().unwrap();
        (loss.item().to_bits(), x.grad().unwrap(), w.grad().unwrap())
    };
    let a = run();
    crate::par::set_parallel(false);
    let b = run();
    crate::par::set_parallel(true);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..40), c in -100.0f64..100.0) {
            let n = v.len();
            let a = t(&v, &[n]).softmax_lastdim();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = t(&shifted, &[n]).softmax_lastdim();
            prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.data().iter().all(|&p| p >= 0.0));
            prop_assert!(close(a.data(), b.data(), 1e-9));
        }

        #[test]
        fn identity_matmul_is_bitwise(m in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
            let a = t(&uniform(seed, m * n), &[m, n]);
            let out = Tensor::<f64>::eye(m).unwrap().matmul(&a).unwrap();
            prop_assert_eq!(out.data(), a.data());
        }

        #[test]
        fn permute_roundtrip(seed in 0u64..1000) {
            let a = t(&uniform(seed, 2 * 3 * 4 * 5), &[2, 3, 4, 5]);
            let p = a.permute(&[3, 1, 0, 2]).unwrap();
            let back = p.permute(&[2, 1, 3, 0]).unwrap();
            prop_assert_eq!(back.data(), a.data());
            prop_assert_eq!(back.shape(), a.shape());
        }
    }
}
