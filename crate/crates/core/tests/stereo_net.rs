//! Integration tests for the stereo network: cost volume against direct patch
//! evaluation, winner-takes-all against a brute-force scan, the left-right
//! check and patch sampling.

use fcdsn::disparity::DisparityMap;
use fcdsn::net::train::*;
use fcdsn::net::*;
use fcdsn::synthetic::{generate_pair, SceneSpec};
use fcdsn::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_net(seed: u64, deformable: bool) -> StereoNet<f64> {
    let cfg = NetConfig {
        feature_widths: vec![4, 4, 4, 6],
        similarity_growth: 3,
        deformable,
        ..NetConfig::default()
    };
    let mut net = StereoNet::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
    // non-zero offsets so the deformable path is exercised
    if let SimilarityHead::Deformable { offsets, .. } = &mut net.similarity.head {
        let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
        offsets.weight.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.05..0.05));
        offsets.bias.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.3..0.3));
    }
    net
}

/// Score of left pixel `(x, y)` against right pixel `(x - d, y)`, computed
/// from two 21x21 patches with valid convolutions only.
fn patch_score(net: &StereoNet<f64>, left: &Tensor<f64>, right: &Tensor<f64>, x: usize, y: usize, d: usize) -> f64 {
    let r = net.patch_size() as isize / 2;
    let lp = left.window(y as isize - r, x as isize - r, 2 * r as usize + 1, 2 * r as usize + 1).unwrap();
    let rp = right
        .window(y as isize - r, x as isize - d as isize - r, 2 * r as usize + 1, 2 * r as usize + 1)
        .unwrap();
    let mut tape = fcdsn::Tape::new();
    let fb = net.features.bind(&mut tape, false);
    let sb = net.similarity.bind(&mut tape, false);
    let l = tape.constant(&lp);
    let rr = tape.constant(&rp);
    let lf = net.features.forward(&mut tape, &fb, l, fcdsn::Padding::Valid).unwrap();
    let rf = net.features.forward(&mut tape, &fb, rr, fcdsn::Padding::Valid).unwrap();
    let s = net.similarity.forward(&mut tape, &sb, lf, rf, fcdsn::Padding::Valid).unwrap();
    assert_eq!(tape.value(s).len(), 1);
    tape.value(s).data()[0]
}

#[test]
fn cost_volume_matches_patch_scores_in_the_interior() {
    for deformable in [false, true] {
        let net = small_net(11, deformable);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (h, w, d_max) = (26, 34, 5);
        let left = normalize_image(&Tensor::uniform([3, h, w], 1.0, &mut rng)).unwrap();
        let right = normalize_image(&Tensor::uniform([3, h, w], 1.0, &mut rng)).unwrap();
        let fl = net.features.extract(&left).unwrap();
        let fr = net.features.extract(&right).unwrap();
        let vol = build_cost_volume(&net.similarity, &fl, &fr, d_max, Direction::LeftReference).unwrap();
        let r = net.patch_size() / 2;
        let mut checked = 0;
        for y in r..h - r {
            for x in r + d_max..w - r {
                for d in 0..d_max {
                    let want = patch_score(&net, &left, &right, x, y, d);
                    let got = vol.at(d, y, x);
                    assert!((want - got).abs() < 1e-10, "d={} y={} x={}: {} vs {}", d, y, x, got, want);
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }
}

#[test]
fn right_reference_volume_matches_patch_scores() {
    let net = small_net(5, true);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (h, w, d_max) = (23, 30, 4);
    let left = normalize_image(&Tensor::uniform([3, h, w], 1.0, &mut rng)).unwrap();
    let right = normalize_image(&Tensor::uniform([3, h, w], 1.0, &mut rng)).unwrap();
    let fl = net.features.extract(&left).unwrap();
    let fr = net.features.extract(&right).unwrap();
    let vol = build_cost_volume(&net.similarity, &fr, &fl, d_max, Direction::RightReference).unwrap();
    let r = net.patch_size() / 2;
    for y in r..h - r {
        for x in r..w - r - d_max {
            for d in 0..d_max {
                // right pixel x against left pixel x + d
                let want = patch_score(&net, &left, &right, x + d, y, d);
                assert!((vol.at(d, y, x) - want).abs() < 1e-10);
            }
        }
    }
    // candidates leaving the image never win
    for y in 0..h {
        for d in 1..d_max {
            for x in w - d..w {
                assert_eq!(vol.at(d, y, x), f64::NEG_INFINITY);
            }
        }
    }
}

#[test]
fn cosine_volume_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, h, w, d_max) = (5, 6, 9, 4);
    let a = Tensor::<f64>::uniform([c, h, w], 1.0, &mut rng);
    let b = Tensor::<f64>::uniform([c, h, w], 1.0, &mut rng);
    let vol = cosine_similarity_volume(&a, &b, d_max, Direction::LeftReference).unwrap();
    for d in 0..d_max {
        for y in 0..h {
            for x in 0..w {
                if x < d {
                    assert_eq!(vol.at(d, y, x), f64::NEG_INFINITY);
                    continue;
                }
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for ch in 0..c {
                    let (p, q) = (a.at3(ch, y, x), b.at3(ch, y, x - d));
                    dot += p * q;
                    na += p * p;
                    nb += q * q;
                }
                assert!((vol.at(d, y, x) - dot / (na.sqrt() * nb.sqrt())).abs() < 1e-12);
            }
        }
    }
}

fn volume_strategy() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (1usize..6, 1usize..5, 1usize..5).prop_flat_map(|(d, h, w)| {
        let cell = prop_oneof![
            4 => (0u8..6).prop_map(|v| v as f64 * 0.25),
            1 => Just(f64::NEG_INFINITY),
        ];
        (Just(d), Just(h), Just(w), proptest::collection::vec(cell, d * h * w))
    })
}

proptest! {
    #[test]
    fn wta_matches_brute_force((d_max, h, w, scores) in volume_strategy()) {
        let vol = CostVolume::new(d_max, h, w, Direction::LeftReference, scores.clone()).unwrap();
        let map = wta_disparity(&vol);
        for y in 0..h {
            for x in 0..w {
                let column: Vec<f64> = (0..d_max).map(|d| scores[(d * h + y) * w + x]).collect();
                let finite: Vec<f64> = column.iter().cloned().filter(|s| s.is_finite()).collect();
                if finite.is_empty() {
                    prop_assert_eq!(map.get(x, y), None);
                } else {
                    let best = finite.iter().cloned().fold(f64::MIN, f64::max);
                    let want = column.iter().position(|s| *s == best).unwrap();
                    prop_assert_eq!(map.get(x, y), Some(want as f32));
                }
            }
        }
    }

    #[test]
    fn consistency_survivors_grow_with_tau(
        w in 3usize..12,
        left in proptest::collection::vec(proptest::option::of(0u8..6), 12),
        right in proptest::collection::vec(proptest::option::of(0u8..6), 12),
        t1 in 0.1f32..3.0,
        extra in 0.0f32..3.0,
    ) {
        let build = |v: &[Option<u8>]| {
            let mut m = DisparityMap::invalid(w, 1);
            for (x, d) in v.iter().take(w).enumerate() {
                if let Some(d) = d {
                    m.set(x, 0, *d as f32);
                }
            }
            m
        };
        let (l, r) = (build(&left), build(&right));
        let tight = lr_consistency(&l, &r, t1).unwrap();
        let loose = lr_consistency(&l, &r, t1 + extra).unwrap();
        for x in 0..w {
            if tight.is_valid(x, 0) {
                prop_assert!(loose.is_valid(x, 0));
            }
            if let Some(v) = loose.get(x, 0) {
                // survivors keep their value and had a valid, close match
                prop_assert_eq!(Some(v), l.get(x, 0));
                let xr = x as i64 - v as i64;
                prop_assert!(xr >= 0);
                let dr = r.get(xr as usize, 0).unwrap();
                prop_assert!((v - dr).abs() <= t1 + extra);
            }
        }
    }
}

/// Right-view truth by forward warping the left truth (nearest surface wins).
fn right_truth(gt: &DisparityMap) -> DisparityMap {
    let mut out = DisparityMap::invalid(gt.width(), gt.height());
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let d = gt.value(x, y);
            let xr = x as i64 - d as i64;
            if xr >= 0 && out.get(xr as usize, y).is_none_or(|old| d > old) {
                out.set(xr as usize, y, d);
            }
        }
    }
    out
}

#[test]
fn consistency_keeps_visible_truth_and_drops_occlusions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pair = generate_pair(&SceneSpec::default(), &mut rng).unwrap();
    let right = right_truth(&pair.gt);
    // integer disparities: an occluder differs by at least 1
    let kept = lr_consistency(&pair.gt, &right, 0.5).unwrap();
    let w = pair.gt.width();
    for y in 0..pair.gt.height() {
        for x in 0..w {
            assert_eq!(kept.is_valid(x, y), !pair.occluded[y * w + x], "x={} y={}", x, y);
        }
    }
}

#[test]
fn triples_sit_at_the_true_and_offset_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pair = generate_pair(&SceneSpec::default(), &mut rng).unwrap();
    let sample = StereoSample {
        left: pair.left.clone(),
        right: pair.right.clone(),
        gt: pair.gt.clone(),
    };
    let batch = sample_triples(&[sample], 200, 21, &mut rng).unwrap();
    for t in &batch {
        let (x, y) = t.center;
        assert_eq!(t.disparity as f32, pair.gt.value(x, y));
        assert!((2..=8).contains(&t.negative_offset.abs()));
        let xp = x as i64 - t.disparity as i64;
        let xn = xp + t.negative_offset as i64;
        let want_l = pair.left.window(y as isize - 10, x as isize - 10, 21, 21).unwrap();
        let want_p = pair.right.window(y as isize - 10, xp as isize - 10, 21, 21).unwrap();
        let want_n = pair.right.window(y as isize - 10, xn as isize - 10, 21, 21).unwrap();
        assert_eq!(t.left, want_l);
        assert_eq!(t.positive, want_p);
        assert_eq!(t.negative, want_n);
    }
    let positive = batch.iter().filter(|t| t.negative_offset > 0).count();
    assert!(positive > 60 && positive < 140, "sign balance {}", positive);
}

#[test]
fn training_lowers_the_loss_on_a_fixed_batch() {
    let cfg = NetConfig {
        feature_widths: vec![4, 4, 4, 6],
        similarity_growth: 3,
        ..NetConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let pair = generate_pair(&SceneSpec::default(), &mut rng).unwrap();
    let sample = StereoSample {
        left: normalize_image(&pair.left).unwrap(),
        right: normalize_image(&pair.right).unwrap(),
        gt: pair.gt.clone(),
    };
    let batch = sample_triples(&[sample], 40, 21, &mut rng).unwrap();
    let net = StereoNet::<f32>::new(&cfg, &mut rng);
    for mode in [SimilarityMode::Trained, SimilarityMode::Cosine] {
        let mut t = JointTrainer::new(net.clone(), mode, fcdsn::AdamConfig::with_lr(1e-3));
        let before = t.batch_loss(&batch).unwrap();
        for _ in 0..30 {
            t.step(&batch).unwrap();
        }
        let after = t.batch_loss(&batch).unwrap();
        assert!(after < before, "{:?}: {} -> {}", mode, before, after);
        assert_eq!(t.steps(), 30);
    }
}
