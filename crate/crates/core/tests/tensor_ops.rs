mod common;

use common::rand_tensor;
use proptest::prelude::*;
use sfas_core::tensor::{
    batchnorm2d, conv2d, conv2d_backward, maxpool2d, softmax_channels, transposed_conv2d, transposed_conv2d_backward,
    BnMode, PoolMode, Shape, Tensor,
};

/// Direct six-loop convolution.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for k in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[k];
                    for c in 0..xs.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                    acc += x.at(n, c, iy as usize, ix as usize) * w.at(k, c, ky, kx);
                                }
                            }
                        }
                    }
                    let i = out.index(n, k, oy, ox);
                    out.data_mut()[i] = acc;
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv_matches_loop_oracle_on_a_chip() {
    let x = rand_tensor(Shape::new(1, 1, 80, 80), 1);
    let w = rand_tensor(Shape::new(16, 1, 3, 3), 2);
    let b: Vec<f64> = (0..16).map(|i| i as f64 * 0.01).collect();
    let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 16, 80, 80));
    let r = conv_oracle(&x, &w, &b, 1, 1);
    assert!(max_abs_diff(y.data(), r.data()) < 1e-12);
}

#[test]
fn strided_multichannel_conv_matches_oracle() {
    let x = rand_tensor(Shape::new(2, 3, 9, 7), 3);
    let w = rand_tensor(Shape::new(4, 3, 3, 3), 4);
    let b = vec![0.1, -0.2, 0.3, 0.0];
    let y = conv2d(&x, &w, Some(&b), 2, 1).unwrap();
    let r = conv_oracle(&x, &w, &b, 2, 1);
    assert_eq!(y.shape(), r.shape());
    assert!(max_abs_diff(y.data(), r.data()) < 1e-12);
}

#[test]
fn all_ones_kernel_weight_gradient_is_window_sum() {
    let x = rand_tensor(Shape::new(1, 1, 5, 5), 5);
    let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
    let g = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
    let grads = conv2d_backward(&x, &w, &g, 1, 0).unwrap();
    for ky in 0..3 {
        for kx in 0..3 {
            let window: f64 = (0..3).flat_map(|oy| (0..3).map(move |ox| (oy, ox))).map(|(oy, ox)| x.at(0, 0, oy + ky, ox + kx)).sum();
            assert!((grads.w.at(0, 0, ky, kx) - window).abs() < 1e-12);
        }
    }
}

#[test]
fn transposed_conv_upsamples_ten_to_twenty() {
    let x = rand_tensor(Shape::new(1, 1, 10, 10), 6);
    let w = rand_tensor(Shape::new(1, 1, 3, 3), 7);
    let y = transposed_conv2d(&x, &w, None, 2, 1, 1).unwrap();
    // (H - 1) * stride - 2 * pad + k + out_pad
    let expect = (10 - 1) * 2 - 2 + 3 + 1;
    assert_eq!(y.shape(), Shape::new(1, 1, expect, expect));
    assert_eq!(expect, 20);
}

#[test]
fn transposed_conv_rejects_non_positive_size() {
    let x = rand_tensor(Shape::new(1, 1, 1, 1), 8);
    let w = rand_tensor(Shape::new(1, 1, 1, 1), 9);
    assert!(transposed_conv2d(&x, &w, None, 1, 1, 0).is_err());
}

#[test]
fn maxpool_matches_loop_oracle() {
    let x = rand_tensor(Shape::new(1, 1, 80, 80), 10);
    let p = maxpool2d(&x, PoolMode::Exact).unwrap();
    assert_eq!(p.out.shape(), Shape::new(1, 1, 40, 40));
    for oy in 0..40 {
        for ox in 0..40 {
            let mut best = f64::NEG_INFINITY;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                best = best.max(x.at(0, 0, 2 * oy + dy, 2 * ox + dx));
            }
            assert_eq!(p.out.at(0, 0, oy, ox), best);
        }
    }
}

#[test]
fn maxpool_rejects_odd_extent_in_exact_mode() {
    let x = rand_tensor(Shape::new(1, 1, 5, 4), 11);
    assert!(maxpool2d(&x, PoolMode::Exact).is_err());
    assert_eq!(maxpool2d(&x, PoolMode::Floor).unwrap().out.shape(), Shape::new(1, 1, 2, 2));
}

#[test]
fn softmax_matches_direct_formula() {
    let x = rand_tensor(Shape::new(3, 10, 2, 2), 12).scale(5.0);
    let y = softmax_channels(&x);
    for n in 0..3 {
        for h in 0..2 {
            for w in 0..2 {
                let z: f64 = (0..10).map(|c| x.at(n, c, h, w).exp()).sum();
                for c in 0..10 {
                    assert!((y.at(n, c, h, w) - x.at(n, c, h, w).exp() / z).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn softmax_is_stable_for_huge_logits() {
    let x = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1000.0, 0.0]).unwrap();
    let y = softmax_channels(&x);
    assert!(y.is_finite());
    assert!((y.data()[0] - 1.0f64).abs() < 1e-15 && y.data()[1] < 1e-300);
}

#[test]
fn identical_inputs_give_bit_identical_outputs() {
    let x = rand_tensor(Shape::new(2, 3, 8, 8), 13);
    let w = rand_tensor(Shape::new(4, 3, 3, 3), 14);
    let a = conv2d(&x, &w, None, 1, 1).unwrap();
    let b = conv2d(&x, &w, None, 1, 1).unwrap();
    assert_eq!(a.data(), b.data());
}

fn geometry() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, u64)> {
    // (c_in, c_out, k, stride, pad, size, seed)
    (1usize..4, 1usize..4, 1usize..4, 1usize..3, 0usize..2, 3usize..9, any::<u64>())
        .prop_filter("kernel fits", |&(_, _, k, _, pad, size, _)| size + 2 * pad >= k)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// <conv(x), y> == <x, conv^T(y)> and the transposed convolution is that
    /// adjoint.
    #[test]
    fn conv_and_transposed_conv_are_adjoint((c_in, c_out, k, stride, pad, size, seed) in geometry()) {
        let x = rand_tensor(Shape::new(2, c_in, size, size), seed);
        let w = rand_tensor(Shape::new(c_out, c_in, k, k), seed ^ 1);
        let y0 = conv2d(&x, &w, None, stride, pad).unwrap();
        let y = rand_tensor(y0.shape(), seed ^ 2);
        let lhs = y0.dot(&y).unwrap();

        let back = conv2d_backward(&x, &w, &y, stride, pad).unwrap();
        prop_assert!((lhs - x.dot(&back.x).unwrap()).abs() < 1e-9);

        // With the right output padding the transposed convolution lands
        // exactly on x's size and is the same adjoint.
        let extra = (size + 2 * pad - k) % stride;
        let t = transposed_conv2d(&y, &w, None, stride, pad, extra).unwrap();
        prop_assert_eq!(t.shape(), x.shape());
        prop_assert!((lhs - x.dot(&t).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn transposed_backward_is_adjoint(seed in any::<u64>(), c_in in 1usize..4, c_out in 1usize..4) {
        let x = rand_tensor(Shape::new(2, c_in, 4, 4), seed);
        let w = rand_tensor(Shape::new(c_in, c_out, 3, 3), seed ^ 3);
        let y0 = transposed_conv2d(&x, &w, None, 2, 1, 1).unwrap();
        let y = rand_tensor(y0.shape(), seed ^ 4);
        let back = transposed_conv2d_backward(&x, &w, &y, 2, 1, 1).unwrap();
        prop_assert!((y0.dot(&y).unwrap() - x.dot(&back.x).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let x = rand_tensor(Shape::new(2, 7, 3, 3), seed).scale(scale);
        let y = softmax_channels(&x);
        for n in 0..2 {
            for p in 0..9 {
                let s: f64 = (0..7).map(|c| y.data()[n * 63 + c * 9 + p]).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                for c in 0..7 {
                    let v = y.data()[n * 63 + c * 9 + p];
                    prop_assert!(v > 0.0 && v <= 1.0);
                }
            }
        }
    }

    #[test]
    fn batchnorm_standardizes_in_batch_mode(seed in any::<u64>(), shift in -5.0f64..5.0, spread in 0.1f64..10.0) {
        let x = rand_tensor(Shape::new(3, 2, 4, 4), seed).map(|v| shift + spread * v);
        let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
        let (y, _) = batchnorm2d(&x, &[1.0, 1.0], &[0.0, 0.0], &mut rm, &mut rv, BnMode::Train, 1e-5, 0.1).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            prop_assert!(mean.abs() < 1e-6);
            // eps keeps the variance a hair under one
            prop_assert!((var - 1.0).abs() < 1e-3 / spread.powi(2) + 1e-6);
        }
        prop_assert!(y.is_finite());
    }
}

#[test]
fn batchnorm_eval_with_unit_stats_is_affine() {
    let x = rand_tensor(Shape::new(2, 2, 3, 3), 15);
    let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
    let (y, _) = batchnorm2d(&x, &[2.0, 0.5], &[3.0, -1.0], &mut rm, &mut rv, BnMode::Eval, 0.0, 0.1).unwrap();
    for n in 0..2 {
        for (c, (g, b)) in [(2.0, 3.0), (0.5, -1.0)].into_iter().enumerate() {
            for (a, e) in y.plane(n, c).iter().zip(x.plane(n, c)) {
                assert!((a - (g * e + b)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn batchnorm_probe_mode_leaves_running_stats() {
    let x = rand_tensor(Shape::new(2, 2, 3, 3), 16);
    let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
    let _ = batchnorm2d(&x, &[1.0, 1.0], &[0.0, 0.0], &mut rm, &mut rv, BnMode::Probe, 1e-5, 0.1).unwrap();
    assert_eq!((rm.clone(), rv.clone()), (vec![0.0; 2], vec![1.0; 2]));
    let _ = batchnorm2d(&x, &[1.0, 1.0], &[0.0, 0.0], &mut rm, &mut rv, BnMode::Train, 1e-5, 0.1).unwrap();
    assert_ne!(rm, vec![0.0; 2]);
}
