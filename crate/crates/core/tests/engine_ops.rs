use fcdsn::engine::kernels;
use fcdsn::{GradCheck, Padding, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), 1.0, r)
}

/// Direct six-loop cross-correlation, zero padding `pad`.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], pad: usize) -> Vec<f64> {
    let (c, h, wd) = x.dims3("t").unwrap();
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let ho = h + 2 * pad + 1 - k;
    let wo = wd + 2 * pad + 1 - k;
    let mut out = vec![0.0; o * ho * wo];
    for oc in 0..o {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = b[oc];
                for ic in 0..c {
                    for ki in 0..k {
                        for kj in 0..k {
                            let iy = oy as isize + ki as isize - pad as isize;
                            let ix = ox as isize + kj as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            s += w.data()[((oc * c + ic) * k + ki) * k + kj] * x.at3(ic, iy as usize, ix as usize);
                        }
                    }
                }
                out[(oc * ho + oy) * wo + ox] = s;
            }
        }
    }
    out
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, p: Padding) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.constant(x), tape.constant(w), tape.constant(b));
    let y = tape.conv2d(x, w, b, p).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_identity_kernel_returns_input() {
    let x = Tensor::<f64>::full([1, 3, 3], 1.0);
    let w = Tensor::full([1, 1, 1, 1], 1.0);
    let b = Tensor::zeros([1]);
    assert_eq!(conv(&x, &w, &b, Padding::Same).data(), x.data());
}

#[test]
fn conv_zero_kernel_gives_bias() {
    let mut r = rng(1);
    let x = rand_t(&[2, 4, 5], &mut r);
    let w = Tensor::zeros([1, 2, 3, 3]);
    let b = Tensor::full([1], 0.75);
    let y = conv(&x, &w, &b, Padding::Same);
    assert_eq!(y.shape(), &[1, 4, 5]);
    assert!(y.data().iter().all(|v| *v == 0.75));
}

#[test]
fn conv_valid_matches_six_loop_reference() {
    let mut r = rng(2);
    let x = rand_t(&[2, 5, 5], &mut r);
    let w = rand_t(&[3, 2, 3, 3], &mut r);
    let b = rand_t(&[3], &mut r);
    let y = conv(&x, &w, &b, Padding::Valid);
    assert_eq!(y.shape(), &[3, 3, 3]);
    for (a, e) in y.data().iter().zip(naive_conv(&x, &w, b.data(), 0)) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn conv_rejects_channel_mismatch_naming_dimension() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&Tensor::zeros([2, 4, 4]));
    let w = tape.constant(&Tensor::zeros([1, 3, 3, 3]));
    let b = tape.constant(&Tensor::zeros([1]));
    let err = tape.conv2d(x, w, b, Padding::Same).unwrap_err().to_string();
    assert!(err.contains("channels"), "{}", err);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_agrees_with_reference_on_random_shapes(
        c in 1usize..=4, o in 1usize..=3, h in 3usize..=16, w in 3usize..=16,
        k in prop::sample::select(vec![1usize, 3, 5]), same in any::<bool>(), seed in any::<u64>()
    ) {
        prop_assume!(k <= h && k <= w);
        let mut r = rng(seed);
        let x = rand_t(&[c, h, w], &mut r);
        let wt = rand_t(&[o, c, k, k], &mut r);
        let b = rand_t(&[o], &mut r);
        let (p, pad) = if same { (Padding::Same, (k - 1) / 2) } else { (Padding::Valid, 0) };
        let y = conv(&x, &wt, &b, p);
        for (a, e) in y.data().iter().zip(naive_conv(&x, &wt, b.data(), pad)) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_positive_and_normalised(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new([v.len()], v).unwrap());
        let p = tape.softmax(x).unwrap();
        let p = tape.value(p).data();
        prop_assert!(p.iter().all(|v| *v > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hinge_is_zero_iff_margin_met(pos in -2.0f64..2.0, neg in -2.0f64..2.0) {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::scalar(pos));
        let b = tape.constant(&Tensor::scalar(neg));
        let l = tape.hinge(a, b, 0.2).unwrap();
        let v = tape.value(l).data()[0];
        prop_assert_eq!(v == 0.0, pos >= neg + 0.2);
    }
}

#[test]
fn concat_places_channels_in_order() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(&Tensor::full([1, 2, 2], 1.0));
    let b = tape.constant(&Tensor::full([1, 2, 2], 2.0));
    let c = tape.concat(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);

    let e = tape.constant(&Tensor::zeros([0, 2, 2]));
    let ae = tape.concat(a, e).unwrap();
    assert_eq!(tape.value(ae), tape.value(a));

    let bad = tape.constant(&Tensor::zeros([1, 3, 2]));
    assert!(tape.concat(a, bad).is_err());
}

#[test]
fn concat_gradient_of_sum_is_ones() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(&Tensor::full([2, 2, 3], 0.3));
    let b = tape.param(&Tensor::full([1, 2, 3], -0.3));
    let c = tape.concat(a, b).unwrap();
    let s = tape.weighted_sum(c, vec![1.0; 18]).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[1.0; 12]);
    assert_eq!(tape.grad(b).unwrap(), &[1.0; 6]);
}

#[test]
fn tanh_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(&Tensor::new([3], vec![0.0, 50.0, -3.0]).unwrap());
    let y = tape.tanh(x);
    let v = tape.value(y).data().to_vec();
    assert_eq!(v[0], 0.0);
    assert!(v[1] > 0.999 && v[1] <= 1.0);
    let s = tape.weighted_sum(y, vec![1.0, 0.0, 0.0]).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap()[0], 1.0);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&Tensor::full([10], 3.7));
    let p = tape.softmax(x).unwrap();
    assert!(tape.value(p).data().iter().all(|v| (v - 0.1).abs() < 1e-15));

    let x = tape.constant(&Tensor::new([2], vec![1000.0, 0.0]).unwrap());
    let p = tape.softmax(x).unwrap();
    let p = tape.value(p).data();
    assert!(p.iter().all(|v| v.is_finite()));
    assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300);

    let mut r = rng(3);
    let v: Vec<f64> = (0..5).map(|_| r.gen_range(-3.0..3.0)).collect();
    let x = tape.constant(&Tensor::new([5], v.clone()).unwrap());
    let p = tape.softmax(x).unwrap();
    let z: f64 = v.iter().map(|a| a.exp()).sum();
    for (a, b) in tape.value(p).data().iter().zip(&v) {
        assert!((a - b.exp() / z).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let mut onehot = vec![0.0; 10];
    onehot[4] = 1.0;
    let p = tape.constant(&Tensor::new([10], onehot).unwrap());
    let l = tape.weighted_cross_entropy(p, 4, 1.0).unwrap();
    assert_eq!(tape.value(l).data()[0], 0.0);

    let p = tape.constant(&Tensor::full([10], 0.1));
    let l = tape.weighted_cross_entropy(p, 7, 1.0).unwrap();
    assert!((tape.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);

    // p[label] = 0 is clamped, not infinite
    let p = tape.constant(&Tensor::new([2], vec![1.0, 0.0]).unwrap());
    let l = tape.weighted_cross_entropy(p, 1, 1.0).unwrap();
    assert!((tape.value(l).data()[0] - 1e-12f64.ln().abs()).abs() < 1e-9);
}

#[test]
fn softmax_cross_entropy_gradient_is_weighted_residual() {
    let mut r = rng(4);
    let logits = rand_t(&[10], &mut r);
    let mut tape = Tape::new();
    let x = tape.param(&logits);
    let p = tape.softmax(x).unwrap();
    let l = tape.weighted_cross_entropy(p, 3, 1.7).unwrap();
    tape.backward(l).unwrap();
    let probs = tape.value(p).data().to_vec();
    for (i, g) in tape.grad(x).unwrap().iter().enumerate() {
        let want = 1.7 * (probs[i] - if i == 3 { 1.0 } else { 0.0 });
        assert!((g - want).abs() < 1e-12);
    }
}

#[test]
fn hinge_examples() {
    let cases = [(1.0, 0.5, 0.0), (0.5, 0.5, 0.2), (0.3, 0.6, 0.5)];
    for (pos, neg, want) in cases {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(&Tensor::scalar(pos));
        let b = tape.param(&Tensor::scalar(neg));
        let l = tape.hinge(a, b, 0.2).unwrap();
        assert!((tape.value(l).data()[0] - want).abs() < 1e-12);
        tape.backward(l).unwrap();
        let (ga, gb) = (tape.grad(a).unwrap()[0], tape.grad(b).unwrap()[0]);
        if want == 0.0 {
            assert_eq!((ga, gb), (0.0, 0.0));
        } else {
            assert_eq!((ga, gb), (-1.0, 1.0));
        }
    }
}

#[test]
fn bilinear_examples_and_position_gradient() {
    let mut r = rng(5);
    let img = rand_t(&[2, 5, 6], &mut r);
    let mut tape = Tape::<f64>::new();
    let i = tape.constant(&img);
    let y = tape.constant(&Tensor::scalar(3.0));
    let x = tape.constant(&Tensor::scalar(2.0));
    let s = tape.bilinear(i, y, x).unwrap();
    assert_eq!(tape.value(s).data(), &[img.at3(0, 3, 2), img.at3(1, 3, 2)]);

    let mid = Tensor::new([1, 2, 2], vec![0.0, 0.0, 4.0, 4.0]).unwrap();
    let v = kernels::bilinear_sample(mid.data(), 1, 2, 2, 0.5, 0.5);
    assert_eq!(v, vec![2.0]);

    // d/dx and d/dy at a generic point against central differences
    let (py, px) = (1.37, 2.61);
    let h = 1e-6;
    let f = |yy: f64, xx: f64| kernels::bilinear_sample(img.data(), 2, 5, 6, yy, xx)[0];
    let fdx = (f(py, px + h) - f(py, px - h)) / (2.0 * h);
    let fdy = (f(py + h, px) - f(py - h, px)) / (2.0 * h);
    let (gy, gx) = kernels::bilinear_sample_backward(img.data(), 2, 5, 6, py, px, &[1.0, 0.0], None);
    assert!((gx - fdx).abs() < 1e-6, "{} vs {}", gx, fdx);
    assert!((gy - fdy).abs() < 1e-6, "{} vs {}", gy, fdy);
}

fn deform(x: &Tensor<f64>, off: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (x, o, w, b) = (tape.constant(x), tape.constant(off), tape.constant(w), tape.constant(b));
    let y = tape.deform_conv2d(x, o, w, b, Padding::Same).unwrap();
    tape.value(y).clone()
}

#[test]
fn deform_with_zero_offsets_is_regular_convolution() {
    let mut r = rng(6);
    for _ in 0..20 {
        let (c, h, w) = (r.gen_range(1..4), r.gen_range(3..9), r.gen_range(3..9));
        let x = rand_t(&[c, h, w], &mut r);
        let wt = rand_t(&[2, c, 3, 3], &mut r);
        let b = rand_t(&[2], &mut r);
        let y = deform(&x, &Tensor::zeros([18, h, w]), &wt, &b);
        let z = conv(&x, &wt, &b, Padding::Same);
        for (a, e) in y.data().iter().zip(z.data()) {
            assert!((a - e).abs() < 1e-10);
        }
    }
}

#[test]
fn deform_with_unit_dx_offset_shifts_input_left() {
    let mut r = rng(7);
    let (c, h, w) = (2, 7, 9);
    let x = rand_t(&[c, h, w], &mut r);
    let wt = rand_t(&[3, c, 3, 3], &mut r);
    let b = rand_t(&[3], &mut r);
    let mut off = Tensor::zeros([18, h, w]);
    for t in 0..9 {
        off.data_mut()[(2 * t + 1) * h * w..(2 * t + 2) * h * w].iter_mut().for_each(|v| *v = 1.0);
    }
    let y = deform(&x, &off, &wt, &b);
    // shifted(x)[.., j] = x[.., j + 1]
    let shifted = Tensor::from_fn([c, h, w], |i| {
        let j = i % w;
        if j + 1 < w {
            x.data()[i + 1]
        } else {
            0.0
        }
    });
    let z = conv(&shifted, &wt, &b, Padding::Same);
    for o in 0..3 {
        for yy in 1..h - 1 {
            for xx in 1..w - 2 {
                let i = (o * h + yy) * w + xx;
                assert!((y.data()[i] - z.data()[i]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn deform_rejects_wrong_offset_channels() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&Tensor::zeros([1, 4, 4]));
    let o = tape.constant(&Tensor::zeros([9, 4, 4]));
    let w = tape.constant(&Tensor::zeros([1, 1, 3, 3]));
    let b = tape.constant(&Tensor::zeros([1]));
    let err = tape.deform_conv2d(x, o, w, b, Padding::Same).unwrap_err().to_string();
    assert!(err.contains("offset channels"), "{}", err);
}

/// Offsets whose fractional sampling positions stay clear of integer kinks.
fn smooth_offsets(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let whole = r.gen_range(-2i32..=1) as f64;
        whole + r.gen_range(0.05..0.95)
    })
}

#[test]
fn deform_offset_gradient_matches_finite_differences() {
    let mut r = rng(8);
    let x = rand_t(&[2, 5, 5], &mut r);
    let wt = rand_t(&[2, 2, 3, 3], &mut r);
    let b = rand_t(&[2], &mut r);
    let off = smooth_offsets(&[18, 5, 5], &mut r);
    let coeffs: Vec<f64> = (0..50).map(|_| r.gen_range(-1.0..1.0)).collect();
    let check = GradCheck::default();
    let report = check
        .run(&off, |tape, o| {
            let x = tape.constant(&x);
            let w = tape.constant(&wt);
            let b = tape.constant(&b);
            let y = tape.deform_conv2d(x, o, w, b, Padding::Same)?;
            tape.weighted_sum(y, coeffs.clone())
        })
        .unwrap();
    assert!(report.passed, "{:?}", report);
}

#[test]
fn grad_check_linear_function_is_exact() {
    let a = Tensor::new([3], vec![0.5, -2.0, 3.0]).unwrap();
    let x = Tensor::new([3], vec![1.0, 1.0, 1.0]).unwrap();
    let report = GradCheck::default()
        .run(&x, |tape, p| tape.weighted_sum(p, a.data().to_vec()))
        .unwrap();
    assert!(report.max_relative_error < 1e-9, "{:?}", report);
}

#[test]
fn grad_check_flags_a_corrupted_backward_rule() {
    // tanh backward written as 1 - y instead of 1 - y^2
    let x = Tensor::<f64>::new([4], vec![0.3, -0.7, 1.1, 0.9]).unwrap();
    let corrupted: Vec<f64> = x.data().iter().map(|v: &f64| 1.0 - v.tanh()).collect();
    let report = GradCheck::default()
        .compare(&x, &corrupted, |t| Ok(t.data().iter().map(|v| v.tanh()).sum()))
        .unwrap();
    assert!(!report.passed, "{:?}", report);

    let correct: Vec<f64> = x.data().iter().map(|v: &f64| 1.0 - v.tanh().powi(2)).collect();
    let report = GradCheck::default()
        .compare(&x, &correct, |t| Ok(t.data().iter().map(|v| v.tanh()).sum()))
        .unwrap();
    assert!(report.passed, "{:?}", report);
}

#[test]
fn tape_clear_releases_nodes() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(&Tensor::zeros([4]));
    let _ = tape.tanh(x);
    assert_eq!(tape.len(), 2);
    tape.clear();
    assert!(tape.is_empty());
}

#[test]
fn reused_operand_accumulates_each_use() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(&Tensor::scalar(0.4));
    let a = tape.tanh(x);
    let l = tape.mean(&[a, a, x]).unwrap();
    tape.backward(l).unwrap();
    let t = 0.4f64.tanh();
    let want = (2.0 * (1.0 - t * t) + 1.0) / 3.0;
    assert!((tape.grad(x).unwrap()[0] - want).abs() < 1e-15);
}
