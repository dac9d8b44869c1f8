use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, primitive_cases, GradCheckOptions};
use super::*;

fn bind(pairs: &[(&str, Tensor)]) -> Bindings {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

#[test]
fn conv_identity_kernel() {
    let mut g = Graph::new();
    let x = g.input("x", Shape::new(1, 1, 1, 1)).unwrap();
    let w = g.input("w", Shape::new(1, 1, 1, 1)).unwrap();
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    let out = g
        .evaluate(
            y,
            &bind(&[("x", Tensor::scalar(-2.5)), ("w", Tensor::scalar(1.0))]),
        )
        .unwrap();
    assert_eq!(out.data(), &[-2.5]);
}

#[test]
fn conv_sums_nine_ones() {
    let mut g = Graph::new();
    let x = g.input("x", Shape::new(1, 1, 3, 3)).unwrap();
    let w = g.input("w", Shape::new(1, 1, 3, 3)).unwrap();
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 1, 1, 1));
    let ones = Tensor::ones(Shape::new(1, 1, 3, 3));
    let out = g
        .evaluate(y, &bind(&[("x", ones.clone()), ("w", ones)]))
        .unwrap();
    assert_eq!(out.item(), 9.0);
}

/// Direct nested-loop convolution, independent of im2col and gemm.
fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let ho = (xs.h() + 2 * pad - ws.h()) / stride + 1;
    let wo = (xs.w() + 2 * pad - ws.w()) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(xs.n(), ws.n(), ho, wo));
    for n in 0..xs.n() {
        for co in 0..ws.n() {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f64;
                    for ci in 0..xs.c() {
                        for ky in 0..ws.h() {
                            for kx in 0..ws.w() {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0
                                    && ix >= 0
                                    && (iy as usize) < xs.h()
                                    && (ix as usize) < xs.w()
                                {
                                    acc += x.at(n, ci, iy as usize, ix as usize) as f64
                                        * w.at(co, ci, ky, kx) as f64;
                                }
                            }
                        }
                    }
                    let o = out.offset(n, co, oy, ox);
                    out.data_mut()[o] = acc as f32;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (1, 3, 7)] {
        let x = Tensor::uniform(Shape::new(2, 3, 9, 8), -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(Shape::new(4, 3, k, k), -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xi = g.input("x", x.shape()).unwrap();
        let wi = g.input("w", w.shape()).unwrap();
        let y = g.conv2d(xi, wi, None, stride, pad).unwrap();
        let out = g
            .evaluate(y, &bind(&[("x", x.clone()), ("w", w.clone())]))
            .unwrap();
        let expected = conv_oracle(&x, &w, stride, pad);
        assert_eq!(out.shape(), expected.shape());
        assert!(
            out.max_abs_diff(&expected) < 1e-5,
            "stride {stride} pad {pad} k {k}"
        );
    }
}

/// Two-pass mean and variance in 64-bit.
fn two_pass_stats(t: &Tensor, c: usize) -> (f64, f64) {
    let s = t.shape();
    let mut vals = Vec::new();
    for n in 0..s.n() {
        for y in 0..s.h() {
            for x in 0..s.w() {
                vals.push(t.at(n, c, y, x) as f64);
            }
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    (mean, var)
}

#[test]
fn batchnorm_train_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = Shape::new(3, 4, 5, 5);
    let x = Tensor::uniform(s, -3.0, 7.0, &mut rng);
    let mut g = Graph::new();
    let xi = g.input("x", s).unwrap();
    let ps = Shape::new(1, 4, 1, 1);
    let gamma = g.param("g", ps).unwrap();
    let beta = g.param("b", ps).unwrap();
    let y = g.batchnorm2d(xi, gamma, beta, None, 1e-5).unwrap();
    let out = g
        .evaluate(
            y,
            &bind(&[
                ("x", x.clone()),
                ("g", Tensor::ones(ps)),
                ("b", Tensor::zeros(ps)),
            ]),
        )
        .unwrap();
    for c in 0..4 {
        let (mean, var) = two_pass_stats(&out, c);
        assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
        let (_, in_var) = two_pass_stats(&x, c);
        let expected = in_var / (in_var + 1e-5);
        assert!((var - expected).abs() < 1e-4, "channel {c} var {var}");
    }
    let (m, v) = g.batch_stats(y).unwrap();
    let (om, ov) = two_pass_stats(&x, 2);
    assert!((m[2] - om).abs() < 1e-9);
    let count = 75.0;
    assert!((v[2] - ov * count / (count - 1.0)).abs() < 1e-9);
}

#[test]
fn sum_gradient_is_ones() {
    let s = Shape::new(2, 3, 4, 5);
    let mut g = Graph::new();
    let x = g.param("x", s).unwrap();
    let y = g.sum(x);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    g.evaluate(y, &bind(&[("x", Tensor::uniform(s, -1.0, 1.0, &mut rng))]))
        .unwrap();
    let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(grads["x"], Tensor::ones(s));
}

#[test]
fn sigmoid_gradient_at_zero() {
    let mut g = Graph::new();
    let x = g.param("x", Shape::scalar()).unwrap();
    let y = g.sigmoid(x);
    let v = g.evaluate(y, &bind(&[("x", Tensor::scalar(0.0))])).unwrap();
    assert_eq!(v.item(), 0.5);
    let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(grads["x"].item(), 0.25);
}

#[test]
fn backward_before_forward_is_usage_error() {
    let mut g = Graph::new();
    let x = g.param("x", Shape::scalar()).unwrap();
    let y = g.sigmoid(x);
    assert!(matches!(
        g.backward(y, &Tensor::scalar(1.0)),
        Err(Error::Usage(_))
    ));
}

#[test]
fn shape_mismatch_names_node_and_shapes() {
    let mut g = Graph::new();
    let a = g.input("a", Shape::new(1, 2, 4, 4)).unwrap();
    let b = g.input("b", Shape::new(1, 3, 4, 4)).unwrap();
    match g.add(a, b) {
        Err(Error::ShapeMismatch { op, lhs, rhs, .. }) => {
            assert_eq!(op, "add");
            assert_eq!(lhs, Shape::new(1, 2, 4, 4));
            assert_eq!(rhs, Shape::new(1, 3, 4, 4));
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    // Binding a tensor of the wrong shape fails at evaluation.
    let y = g.relu(a);
    let err = g.evaluate(y, &bind(&[("a", Tensor::zeros(Shape::new(1, 2, 4, 3)))]));
    assert!(matches!(err, Err(Error::ShapeMismatch { op: "leaf", .. })));
    let err = g.evaluate(y, &Bindings::new());
    assert!(matches!(err, Err(Error::Usage(_))));
}

#[test]
fn non_finite_output_is_numeric_fault() {
    let mut g = Graph::new();
    let x = g.input("x", Shape::scalar()).unwrap();
    let y = g.scale(x, 1e30).unwrap();
    let y = g.scale(y, 1e30).unwrap();
    let err = g.evaluate(y, &bind(&[("x", Tensor::scalar(1.0))]));
    assert!(matches!(err, Err(Error::NumericFault { op: "scale", .. })));
}

#[test]
fn shared_leaf_accumulates_gradient() {
    // y = sum(x * x) -> dy/dx = 2x
    let s = Shape::new(1, 1, 2, 2);
    let mut g = Graph::new();
    let x = g.param("x", s).unwrap();
    let x2 = g.param("x", s).unwrap();
    assert_eq!(x, x2);
    let p = g.mul(x, x2).unwrap();
    let y = g.sum(p);
    let xv = Tensor::new(s, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    g.evaluate(y, &bind(&[("x", xv.clone())])).unwrap();
    let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(grads["x"], xv.map(|v| 2.0 * v));
}

#[test]
fn evaluate_is_bit_reproducible() {
    let cases = primitive_cases(3).unwrap();
    for mut case in cases {
        let a = case.graph.evaluate(case.root, &case.bindings).unwrap();
        let b = case.graph.evaluate(case.root, &case.bindings).unwrap();
        assert_eq!(
            a.data()[0].to_bits(),
            b.data()[0].to_bits(),
            "{}",
            case.name
        );
    }
}

#[test]
fn concat_then_slice_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = Tensor::uniform(Shape::new(2, 3, 4, 5), -1.0, 1.0, &mut rng);
    let b = Tensor::uniform(Shape::new(2, 2, 4, 5), -1.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let ai = g.input("a", a.shape()).unwrap();
    let bi = g.input("b", b.shape()).unwrap();
    let c = g.concat(&[ai, bi]).unwrap();
    let out = g
        .evaluate(c, &bind(&[("a", a.clone()), ("b", b.clone())]))
        .unwrap();
    assert_eq!(out.slice_channels(0, 3).unwrap(), a);
    assert_eq!(out.slice_channels(3, 2).unwrap(), b);
}

#[test]
fn mul_identity_and_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = Shape::new(2, 3, 4, 4);
    let x = Tensor::uniform(s, -1.0, 1.0, &mut rng);
    for (other, expect_zero) in [(Tensor::ones(s), false), (Tensor::zeros(s), true)] {
        let mut g = Graph::new();
        let xi = g.input("x", s).unwrap();
        let oi = g.input("o", s).unwrap();
        let y = g.mul(xi, oi).unwrap();
        let out = g
            .evaluate(y, &bind(&[("x", x.clone()), ("o", other)]))
            .unwrap();
        if expect_zero {
            assert!(out.data().iter().all(|&v| v == 0.0));
        } else {
            assert_eq!(out, x);
        }
    }
}

#[test]
fn bilinear_same_size_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::uniform(Shape::new(1, 2, 7, 5), -1.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let xi = g.input("x", x.shape()).unwrap();
    let y = g.resize_bilinear(xi, 7, 5).unwrap();
    let out = g.evaluate(y, &bind(&[("x", x.clone())])).unwrap();
    assert!(out.max_abs_diff(&x) <= 1e-6);
}

#[test]
fn bilinear_upsample_interpolates() {
    // A 1x2 row [0, 1] resized to width 4 gives [0, 0.25, 0.75, 1].
    let mut g = Graph::new();
    let xi = g.input("x", Shape::new(1, 1, 1, 2)).unwrap();
    let y = g.resize_bilinear(xi, 1, 4).unwrap();
    let out = g
        .evaluate(
            y,
            &bind(&[(
                "x",
                Tensor::new(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap(),
            )]),
        )
        .unwrap();
    assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn maxpool_and_upsample_shapes() {
    let mut g = Graph::new();
    let x = g.input("x", Shape::new(1, 1, 4, 4)).unwrap();
    let p = g.maxpool2(x).unwrap();
    let u = g.upsample2(p);
    let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
    let out = g
        .evaluate(
            u,
            &bind(&[("x", Tensor::new(Shape::new(1, 1, 4, 4), data).unwrap())]),
        )
        .unwrap();
    assert_eq!(
        out.data(),
        &[5.0, 5.0, 7.0, 7.0, 5.0, 5.0, 7.0, 7.0, 13.0, 13.0, 15.0, 15.0, 13.0, 13.0, 15.0, 15.0]
    );
    let odd = g.input("odd", Shape::new(1, 1, 3, 4)).unwrap();
    assert!(g.maxpool2(odd).is_err());
}

#[test]
fn linear_graph_exact_gradient() {
    let s = Shape::new(1, 1, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut g = Graph::new();
    let w = g.param("w", s).unwrap();
    let x = g.input("x", s).unwrap();
    let y = g.mul(w, x).unwrap();
    let y = g.sum(y);
    let b = bind(&[
        ("w", Tensor::uniform(s, -1.0, 1.0, &mut rng)),
        ("x", Tensor::uniform(s, -1.0, 1.0, &mut rng)),
    ]);
    let report = grad_check(&mut g, y, &b, &GradCheckOptions::default()).unwrap();
    assert!(report.passed);
    assert!(report.max_rel_error() < 1e-4, "{}", report.max_rel_error());
}

#[test]
fn gradcheck_without_differentiable_leaf() {
    let mut g = Graph::new();
    let x = g.input("x", Shape::scalar()).unwrap();
    let y = g.sigmoid(x);
    let err = grad_check(
        &mut g,
        y,
        &bind(&[("x", Tensor::scalar(0.3))]),
        &GradCheckOptions::default(),
    );
    assert!(matches!(err, Err(Error::Usage(_))));
}

#[test]
fn every_primitive_passes_gradcheck_over_ten_seeds() {
    let opts = GradCheckOptions::default();
    for seed in 0..10 {
        for mut case in primitive_cases(seed).unwrap() {
            let report = grad_check(&mut case.graph, case.root, &case.bindings, &opts).unwrap();
            assert!(
                report.passed,
                "{} seed {seed}: max rel error {} on {:?}",
                case.name,
                report.max_rel_error(),
                report.failing()
            );
            let checked: usize = report.leaves.iter().map(|l| l.checked).sum();
            assert!(checked > 0, "{}", case.name);
        }
    }
}

#[test]
fn conv_weight_sign_flip_is_caught() {
    let mut cases = primitive_cases(1).unwrap();
    let case = cases.iter_mut().find(|c| c.name == "conv2d").unwrap();
    case.graph
        .set_backward_fault(Some(BackwardFault::NegateConvWeightGrad));
    let report = grad_check(
        &mut case.graph,
        case.root,
        &case.bindings,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(!report.passed);
    assert_eq!(report.failing(), vec!["conv.weight"]);
}

#[test]
fn conv_relu_mean_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut g = Graph::new();
    let xs = Shape::new(1, 2, 8, 8);
    let x = g.param("x", xs).unwrap();
    let w1 = g.param("w1", Shape::new(3, 2, 3, 3)).unwrap();
    let w2 = g.param("w2", Shape::new(2, 3, 3, 3)).unwrap();
    let h = g.conv2d(x, w1, None, 1, 1).unwrap();
    let h = g.relu(h);
    let h = g.conv2d(h, w2, None, 1, 1).unwrap();
    let h = g.relu(h);
    let y = g.mean(h);
    let b = bind(&[
        ("x", Tensor::uniform(xs, -1.0, 1.0, &mut rng)),
        (
            "w1",
            Tensor::uniform(Shape::new(3, 2, 3, 3), -0.5, 0.5, &mut rng),
        ),
        (
            "w2",
            Tensor::uniform(Shape::new(2, 3, 3, 3), -0.5, 0.5, &mut rng),
        ),
    ]);
    let report = grad_check(&mut g, y, &b, &GradCheckOptions::default()).unwrap();
    assert!(report.passed, "{:?}", report.leaves);
}
