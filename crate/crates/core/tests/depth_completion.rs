//! Gathering, labelling and filling checked against naive references and
//! invariants over random sparse maps.

use fcdsn::dc::*;
use fcdsn::disparity::DisparityMap;
use fcdsn::selftest::oracles::{gather_reference, label_reference};
use fcdsn::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sparse_strategy() -> impl Strategy<Value = DisparityMap> {
    (2usize..14, 1usize..9, 0.05f64..0.95).prop_flat_map(|(w, h, density)| {
        let cell = (proptest::bool::weighted(density), 0u8..12);
        proptest::collection::vec(cell, w * h).prop_map(move |cells| {
            let values = cells.iter().map(|(_, v)| *v as f32).collect();
            let valid = cells.iter().map(|(ok, _)| *ok).collect();
            DisparityMap::from_parts(w, h, values, valid).unwrap()
        })
    })
}

fn random_sparse(w: usize, h: usize, density: f64, rng: &mut ChaCha8Rng) -> DisparityMap {
    let mut m = DisparityMap::invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            if rng.gen_bool(density) {
                m.set(x, y, rng.gen_range(0..16) as f32);
            }
        }
    }
    m
}

proptest! {
    #[test]
    fn gather_matches_reference(map in sparse_strategy()) {
        for y in 0..map.height() {
            for x in 0..map.width() {
                if map.is_valid(x, y) {
                    prop_assert!(gather_valid(&map, x, y).is_err());
                    continue;
                }
                let got = gather_valid(&map, x, y).unwrap().map(|g| g.values.to_vec());
                prop_assert_eq!(got, gather_reference(&map, x, y));
            }
        }
    }

    #[test]
    fn gathered_positions_are_valid_and_distinct(map in sparse_strategy()) {
        for y in 0..map.height() {
            for x in 0..map.width() {
                if map.is_valid(x, y) {
                    continue;
                }
                if let Some(g) = gather_valid(&map, x, y).unwrap() {
                    for (i, &(px, py)) in g.positions.iter().enumerate() {
                        prop_assert!(map.is_valid(px, py));
                        prop_assert_eq!(g.values[i], map.value(px, py));
                        prop_assert!(!g.positions[..i].contains(&(px, py)));
                    }
                } else {
                    prop_assert!(map.valid_count() < GATHER_COUNT);
                }
            }
        }
    }

    #[test]
    fn label_is_the_earliest_closest_entry(
        values in proptest::collection::vec(0u8..20, GATHER_COUNT),
        gt in 0.0f32..20.0,
        half_width in 0.0f32..4.0,
    ) {
        let values: Vec<f32> = values.iter().map(|v| *v as f32).collect();
        let label = make_label(&values, gt, half_width);
        prop_assert_eq!(label, label_reference(&values, gt, half_width));
        match label {
            Some(i) => {
                let di = (values[i] - gt).abs();
                prop_assert!(di <= half_width);
                for (j, v) in values.iter().enumerate() {
                    let dj = (v - gt).abs();
                    prop_assert!(dj >= di);
                    if j < i {
                        prop_assert!(dj > di);
                    }
                }
            }
            None => prop_assert!(values.iter().all(|v| (v - gt).abs() > half_width)),
        }
    }

    #[test]
    fn discarding_shrinks_as_the_range_widens(
        values in proptest::collection::vec(0u8..20, GATHER_COUNT),
        gt in 0.0f32..20.0,
        narrow in 0.0f32..3.0,
        extra in 0.0f32..3.0,
    ) {
        let values: Vec<f32> = values.iter().map(|v| *v as f32).collect();
        if make_label(&values, gt, narrow).is_some() {
            prop_assert!(make_label(&values, gt, narrow + extra).is_some());
        }
    }

    #[test]
    fn class_weights_are_inverse_frequency_with_unit_mean(
        labels in proptest::collection::vec(0usize..GATHER_COUNT, 1..200),
    ) {
        let w = compute_class_weights(&labels).unwrap();
        let mut counts = [0usize; GATHER_COUNT];
        labels.iter().for_each(|l| counts[*l] += 1);
        let observed: Vec<usize> = (0..GATHER_COUNT).filter(|c| counts[*c] > 0).collect();
        let mean = observed.iter().map(|c| w[*c]).sum::<f64>() / observed.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-9);
        for &a in &observed {
            for &b in &observed {
                // w_a * n_a is the same for every observed class
                prop_assert!((w[a] * counts[a] as f64 - w[b] * counts[b] as f64).abs() < 1e-6 * labels.len() as f64);
            }
        }
        for c in 0..GATHER_COUNT {
            if counts[c] == 0 {
                prop_assert_eq!(w[c], 1.0);
            }
        }
    }
}

#[test]
fn class_weights_reject_empty_and_out_of_range_labels() {
    assert!(compute_class_weights(&[]).is_err());
    assert!(compute_class_weights(&[GATHER_COUNT]).is_err());
}

#[test]
fn fill_agrees_with_independent_per_pixel_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (w, h) = (17, 12);
    let sparse = random_sparse(w, h, 0.4, &mut rng);
    let image = Tensor::<f32>::uniform([3, h, w], 1.0, &mut rng);
    let net = DcNet::<f32>::new([8, 8], &mut rng);
    let filled = fill_disparities(&sparse, &image, &net).unwrap();
    let norm = fcdsn::net::normalize_image(&image).unwrap();
    let field = GatherField::new(&sparse).unwrap();
    assert_eq!(filled.valid_count(), w * h);
    for y in 0..h {
        for x in 0..w {
            if let Some(d) = sparse.get(x, y) {
                assert_eq!(filled.get(x, y), Some(d));
                continue;
            }
            // one pixel alone, from the original map only
            let input = field.input(&norm, x, y).unwrap();
            let probs = net.predict(&[input]).unwrap()[0];
            let best = (0..GATHER_COUNT)
                .fold(0, |b, c| if probs[c] > probs[b] { c } else { b });
            let g = gather_valid(&sparse, x, y).unwrap().unwrap();
            assert_eq!(filled.get(x, y), Some(g.values[best]));
        }
    }
}

#[test]
fn filled_values_stay_within_the_valid_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let (w, h) = (rng.gen_range(5..20), rng.gen_range(3..12));
        let sparse = random_sparse(w, h, rng.gen_range(0.2..0.8), &mut rng);
        if sparse.valid_count() < GATHER_COUNT {
            continue;
        }
        let image = Tensor::<f32>::uniform([3, h, w], 1.0, &mut rng);
        let net = DcNet::<f32>::new([6, 6], &mut rng);
        let filled = fill_disparities(&sparse, &image, &net).unwrap();
        let valid: Vec<f32> = (0..w * h)
            .filter(|i| sparse.mask()[*i])
            .map(|i| sparse.values()[i])
            .collect();
        let lo = valid.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = valid.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        for v in filled.values() {
            assert!(*v >= lo && *v <= hi);
            assert!(valid.contains(v));
        }
    }
}

#[test]
fn too_sparse_maps_keep_their_holes() {
    let mut sparse = DisparityMap::invalid(6, 4);
    for x in 0..GATHER_COUNT - 1 {
        sparse.set(x % 6, x / 6, 3.0);
    }
    let image = Tensor::<f32>::zeros([3, 4, 6]);
    let net = DcNet::<f32>::new([4, 4], &mut ChaCha8Rng::seed_from_u64(0));
    let filled = fill_disparities(&sparse, &image, &net).unwrap();
    assert_eq!(filled, sparse);
}

#[test]
fn labelled_holes_match_make_label() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (w, h) = (20, 10);
    let gt = DisparityMap::dense(w, h, (0..w * h).map(|_| rng.gen_range(0..16) as f32).collect()).unwrap();
    let mut sparse = gt.clone();
    for y in 0..h {
        for x in 0..w {
            if rng.gen_bool(0.4) {
                sparse.invalidate(x, y);
            }
        }
    }
    let image = Tensor::<f32>::uniform([3, h, w], 1.0, &mut rng);
    let holes = labelled_holes(&sparse, &image, &gt, 2.0).unwrap();
    let mut expect = Vec::new();
    let mut discarded = 0;
    for y in 0..h {
        for x in 0..w {
            if sparse.is_valid(x, y) {
                continue;
            }
            let g = gather_valid(&sparse, x, y).unwrap().unwrap();
            match label_reference(&g.values, gt.value(x, y), 2.0) {
                Some(l) => expect.push(l),
                None => discarded += 1,
            }
        }
    }
    let got: Vec<usize> = holes.samples.iter().map(|s| s.label).collect();
    assert_eq!(got, expect);
    assert_eq!(holes.discarded, discarded);
    for s in &holes.samples {
        assert_eq!(s.input.shape(), &[DC_CHANNELS, DC_PATCH, DC_PATCH]);
    }
}

#[test]
fn class_histogram_favours_near_entries() {
    // on smooth truth the first gathered neighbours are the usual answer
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (w, h) = (40, 30);
    let gt = DisparityMap::dense(w, h, (0..w * h).map(|i| ((i % w) / 10) as f32 * 3.0).collect()).unwrap();
    let mut sparse = gt.clone();
    for y in 0..h {
        for x in 0..w {
            if rng.gen_bool(0.3) {
                sparse.invalidate(x, y);
            }
        }
    }
    let image = Tensor::<f32>::uniform([3, h, w], 1.0, &mut rng);
    let holes = labelled_holes(&sparse, &image, &gt, 2.0).unwrap();
    let mut counts = [0usize; GATHER_COUNT];
    holes.samples.iter().for_each(|s| counts[s.label] += 1);
    assert!(counts[0] + counts[1] > counts[2..].iter().sum::<usize>(), "{:?}", counts);
}

#[test]
fn trainer_lowers_weighted_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<DcSample<f32>> = (0..64)
        .map(|i| {
            let label = i % GATHER_COUNT;
            let mut t = Tensor::<f32>::uniform([DC_CHANNELS, DC_PATCH, DC_PATCH], 0.5, &mut rng);
            let plane = DC_PATCH * DC_PATCH;
            t.data_mut()[label * plane..(label + 1) * plane].iter_mut().for_each(|v| *v += 1.0);
            DcSample { input: t, label }
        })
        .collect();
    let net = DcNet::<f32>::new([16, 16], &mut rng);
    let mut trainer = DcTrainer::for_samples(net, &samples, fcdsn::AdamConfig::with_lr(1e-3)).unwrap();
    let first = trainer.step(&samples).unwrap().loss().unwrap();
    let mut last = first;
    for _ in 0..40 {
        last = trainer.step(&samples).unwrap().loss().unwrap();
    }
    assert!(last < first, "{} -> {}", first, last);
    assert!(trainer.accuracy(&samples).unwrap() > 0.5);
}
