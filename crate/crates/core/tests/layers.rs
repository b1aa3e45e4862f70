use menet::autodiff::Tape;
use menet::nn::{
    batch_norm, concat_channels, conv2d, deconv2d, max_pool2, relu, replicate_upsample, softmax2,
    BatchNormParams, BnMode,
};
use menet::rng::random_normal;
use menet::{Rng, Tensor};
use proptest::prelude::*;

fn randn(seed: u64, shape: &[usize]) -> Tensor<f64> {
    random_normal(&mut Rng::new(seed, 0), shape, 0.0, 1.0).unwrap()
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut t = Tape::new();
    let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
    let y = conv2d(&mut t, xv, wv, None, stride, pad).unwrap();
    t.value(y).clone()
}

fn deconv(x: &Tensor<f64>, w: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    let mut t = Tape::new();
    let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
    let y = deconv2d(&mut t, xv, wv, None, 2, pad).unwrap();
    t.value(y).clone()
}

fn unary(
    x: &Tensor<f64>,
    f: impl Fn(&mut Tape<f64>, menet::autodiff::Var) -> menet::Result<menet::autodiff::Var>,
) -> Tensor<f64> {
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let y = f(&mut t, xv).unwrap();
    t.value(y).clone()
}

/// Nested-loop cross-correlation with zero padding.
fn brute_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (
        (h + 2 * pad - k) / stride + 1,
        (wd + 2 * pad - k) / stride + 1,
    );
    let at = |b: usize, ch: usize, y: isize, xx: isize| {
        if y < 0 || xx < 0 || y as usize >= h || xx as usize >= wd {
            0.0
        } else {
            x.data()[((b * c + ch) * h + y as usize) * wd + xx as usize]
        }
    };
    let mut out = Vec::with_capacity(n * co * ho * wo);
    for b in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let y = (oy * stride + i) as isize - pad as isize;
                                let xx = (ox * stride + j) as isize - pad as isize;
                                acc += w.data()[((o * c + ch) * k + i) * k + j] * at(b, ch, y, xx);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::from_vec(&[n, co, ho, wo], out).unwrap()
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn delta_kernel_is_the_identity() {
    let x = randn(1, &[2, 3, 5, 5]);
    let mut w = Tensor::zeros(&[3, 3, 3, 3]);
    for c in 0..3 {
        w.data_mut()[(c * 3 + c) * 9 + 4] = 1.0;
    }
    assert_eq!(conv(&x, &w, 1, 1), x);
}

#[test]
fn box_kernel_on_ones_counts_the_window() {
    // 3x3 ones kernel over c channels of ones: 9c inside, fewer on the border
    let c = 4;
    let x = Tensor::ones(&[1, c, 6, 6]);
    let w = Tensor::ones(&[1, c, 3, 3]);
    let y = conv(&x, &w, 1, 1);
    assert_eq!(y.data()[2 * 6 + 3], 9.0 * c as f64);
    assert_eq!(y.data()[0], 4.0 * c as f64);
    assert_eq!(y.data()[3], 6.0 * c as f64);
}

#[test]
fn convolution_matches_nested_loops() {
    for (seed, stride, k, pad) in [(2, 1, 3, 1), (3, 2, 3, 1), (4, 1, 1, 0), (5, 2, 5, 2)] {
        let x = randn(seed, &[2, 3, 8, 8]);
        let w = randn(seed + 100, &[4, 3, k, k]);
        let d = max_diff(&conv(&x, &w, stride, pad), &brute_conv(&x, &w, stride, pad));
        assert!(d < 1e-12, "stride {stride} k {k}: {d}");
    }
}

#[test]
fn bias_is_added_per_channel() {
    let x = randn(6, &[1, 2, 4, 4]);
    let w = randn(7, &[3, 2, 3, 3]);
    let b = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    let mut t = Tape::new();
    let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b));
    let y = conv2d(&mut t, xv, wv, Some(bv), 1, 1).unwrap();
    let plain = conv(&x, &w, 1, 1);
    for (i, (a, p)) in t.value(y).data().iter().zip(plain.data()).enumerate() {
        let ch = i / 16;
        assert!((a - p - [0.5, -1.0, 2.0][ch]).abs() < 1e-12);
    }
}

#[test]
fn transposed_convolution_is_the_adjoint() {
    // <conv(x), y> == <x, deconv(y)> for the same kernel
    for (k, pad) in [(3, 1), (1, 0), (5, 2)] {
        let x = randn(8, &[2, 3, 8, 8]);
        let w = randn(9, &[5, 3, k, k]);
        let y = randn(10, &[2, 5, 4, 4]);
        let lhs = conv(&x, &w, 2, pad).dot(&y).unwrap();
        let rhs = x.dot(&deconv(&y, &w, pad)).unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "k {k}");
    }
}

#[test]
fn pointwise_deconv_spreads_onto_the_stride_grid() {
    // a 1x1 kernel places each input on even coordinates and leaves the rest zero
    let x = randn(11, &[1, 1, 3, 3]);
    let w = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
    let y = deconv(&x, &w, 0);
    assert_eq!(y.shape(), &[1, 1, 6, 6]);
    for r in 0..6 {
        for c in 0..6 {
            let v = y.data()[r * 6 + c];
            if r % 2 == 0 && c % 2 == 0 {
                assert_eq!(v, 2.0 * x.data()[(r / 2) * 3 + c / 2]);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }
}

#[test]
fn stride_two_round_trip_restores_the_shape() {
    let x = randn(12, &[1, 2, 16, 16]);
    let w = randn(13, &[4, 2, 3, 3]);
    let down = conv(&x, &w, 2, 1);
    assert_eq!(down.shape(), &[1, 4, 8, 8]);
    assert_eq!(deconv(&down, &w, 1).shape(), x.shape());
}

#[test]
fn train_mode_batch_norm_standardizes_each_channel() {
    let x = randn(14, &[4, 3, 5, 5]).map(|v| 3.0 * v + 7.0);
    let params = BatchNormParams::<f64>::new(3, false);
    let mut t = Tape::new();
    let xv = t.constant(x);
    let (y, stats) = batch_norm(&mut t, xv, None, None, &params, BnMode::Train).unwrap();
    let y = t.value(y);
    assert!(stats.is_some());
    for c in 0..3 {
        let v: Vec<f64> = (0..4)
            .flat_map(|b| y.data()[(b * 3 + c) * 25..(b * 3 + c + 1) * 25].to_vec())
            .collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-12);
        // eps keeps the variance slightly below one
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }
}

#[test]
fn inference_batch_norm_uses_running_statistics() {
    let x = randn(15, &[1, 2, 3, 3]);
    let mut params = BatchNormParams::<f64>::new(2, true);
    params.running_mean = Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap();
    params.running_var = Tensor::from_vec(&[2], vec![4.0, 0.25]).unwrap();
    params.gamma = Some(Tensor::from_vec(&[2], vec![2.0, -1.0]).unwrap());
    params.beta = Some(Tensor::from_vec(&[2], vec![0.1, 0.3]).unwrap());
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let g = t.constant(params.gamma.clone().unwrap());
    let b = t.constant(params.beta.clone().unwrap());
    let (y, stats) = batch_norm(&mut t, xv, Some(g), Some(b), &params, BnMode::Inference).unwrap();
    assert!(stats.is_none());
    let (m, v, gm, bt) = ([0.5, -1.0], [4.0, 0.25], [2.0, -1.0], [0.1, 0.3]);
    for (i, &out) in t.value(y).data().iter().enumerate() {
        let c = i / 9;
        let expect = (x.data()[i] - m[c]) / (v[c] + params.eps).sqrt() * gm[c] + bt[c];
        assert!((out - expect).abs() < 1e-12);
    }
}

#[test]
fn train_mode_needs_two_samples() {
    let params = BatchNormParams::<f64>::new(1, false);
    let mut t = Tape::new();
    let xv = t.constant(Tensor::ones(&[1, 1, 2, 2]));
    assert!(batch_norm(&mut t, xv, None, None, &params, BnMode::Train).is_err());
}

#[test]
fn relu_clamps_negatives() {
    let x = Tensor::from_vec(&[1, 1, 1, 4], vec![-1.5, 0.0, 0.25, 3.0]).unwrap();
    assert_eq!(unary(&x, relu).data(), &[0.0, 0.0, 0.25, 3.0]);
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let x = Tensor::from_vec(&[1, 2, 1, 3], vec![1000.0, 0.0, 1.0, 0.0, 1000.0, 1.0]).unwrap();
    let p = unary(&x, softmax2);
    assert!(p.is_finite());
    assert_eq!(p.data()[0], 1.0);
    assert!(p.data()[3] < 1e-300);
    assert_eq!(p.data()[1], 0.0);
    assert_eq!(p.data()[4], 1.0);
    assert!((p.data()[2] - 0.5).abs() < 1e-15);
    let three = Tensor::<f64>::zeros(&[1, 3, 1, 1]);
    let mut t = Tape::new();
    let v = t.constant(three);
    assert!(softmax2(&mut t, v).is_err());
}

#[test]
fn replication_fills_the_expected_block() {
    // 1-based input (row 2, col 1) lands on output rows 3-4, cols 1-2
    let x = Tensor::from_vec(&[1, 1, 3, 2], (1..=6).map(f64::from).collect()).unwrap();
    let y = unary(&x, |t, v| replicate_upsample(t, v, 2));
    assert_eq!(y.shape(), &[1, 1, 6, 4]);
    for r in 2..4 {
        for c in 0..2 {
            assert_eq!(y.data()[r * 4 + c], 3.0);
        }
    }
    assert_eq!(unary(&x, |t, v| replicate_upsample(t, v, 1)), x);
    let mut t = Tape::new();
    let v = t.constant(x);
    assert!(replicate_upsample(&mut t, v, 0).is_err());
}

#[test]
fn concat_stacks_channels_in_order() {
    let a = randn(16, &[2, 1, 3, 3]);
    let b = randn(17, &[2, 2, 3, 3]);
    let mut t = Tape::new();
    let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
    let y = concat_channels(&mut t, &[av, bv]).unwrap();
    let y = t.value(y);
    assert_eq!(y.shape(), &[2, 3, 3, 3]);
    for n in 0..2 {
        assert_eq!(&y.image(n)[..9], a.image(n));
        assert_eq!(&y.image(n)[9..], b.image(n));
    }
    let c = t.constant(Tensor::zeros(&[2, 1, 4, 4]));
    assert!(concat_channels(&mut t, &[av, c]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_deconv_adjoint_for_random_shapes(
        seed in any::<u64>(),
        ci in 1usize..4,
        co in 1usize..4,
        half in 1usize..5,
    ) {
        let x = randn(seed, &[1, ci, 2 * half, 2 * half]);
        let w = randn(seed ^ 1, &[co, ci, 3, 3]);
        let y = randn(seed ^ 2, &[1, co, half, half]);
        let lhs = conv(&x, &w, 2, 1).dot(&y).unwrap();
        let rhs = x.dot(&deconv(&y, &w, 1)).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn upsample_then_pool_is_identity(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
        let x = randn(seed, &[1, 2, h, w]);
        let up = unary(&x, |t, v| replicate_upsample(t, v, 2));
        prop_assert_eq!(unary(&up, max_pool2), x.clone());
        // each output block averages back to its source value
        let (oh, ow) = (2 * h, 2 * w);
        for c in 0..2 {
            for r in 0..h {
                for q in 0..w {
                    let s: f64 = (0..2).flat_map(|i| (0..2).map(move |j| (i, j)))
                        .map(|(i, j)| up.data()[(c * oh + 2 * r + i) * ow + 2 * q + j])
                        .sum();
                    prop_assert!((s / 4.0 - x.data()[(c * h + r) * w + q]).abs() < 1e-15);
                }
            }
        }
    }
}
