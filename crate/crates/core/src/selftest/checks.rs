use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Model};
use crate::dc::{
    fill_disparities, gather_valid, labelled_holes, make_label, DcNet, DcSample, DcTrainer, DC_CHANNELS, DC_PATCH,
    GATHER_COUNT,
};
use crate::disparity::DisparityMap;
use crate::engine::{AdamConfig, GradCheck, Padding, SampleBounds, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::io::{decode_pfm, encode_pfm, read_disparity_png16, write_disparity_png16, ImageBuffer, Samples};
use crate::metrics::{n_point_error, InvalidPolicy, PE_THRESHOLDS};
use crate::net::similarity::SimilarityHead;
use crate::net::{Bound, Module, NetConfig, SimilarityMode, StereoNet, DEFAULT_TAU};
use crate::synthetic::generate_pair;

use super::oracles::{gather_reference, label_reference, n_pe_reference, pfm_reference_writer};
use super::overfit::{overfit_pair, OverfitConfig, OverfitRun};
use super::{timed, CriterionReport, Verdict};

const GRAD_TRIALS: usize = 20;
const GRAD_TOLERANCE: f64 = 1e-5;

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

/// Fixed pseudo-random read-out weights so every output entry matters.
fn readout(n: usize) -> Vec<f64> {
    (0..n).map(|i| (1.7 * i as f64 + 0.3).sin()).collect()
}

fn reduce(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    tape.weighted_sum(y, readout(n))
}

/// Worst relative error over the gradients with respect to every input.
fn check_inputs(
    inputs: &[Tensor<f64>],
    check: &GradCheck,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let report = check.run(&inputs[k], |tape, v| {
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| if i == k { v } else { tape.constant(t) })
                .collect();
            f(tape, &vars)
        })?;
        if !report.max_relative_error.is_finite() {
            return Err(Error::NonFinite(format!("gradient check of input {}", k)));
        }
        worst = worst.max(report.max_relative_error);
    }
    Ok(worst)
}

/// `whole + frac` with the fractional part clear of bilinear kinks.
fn smooth(r: &mut ChaCha8Rng, lo: i32, hi: i32) -> f64 {
    r.gen_range(lo..=hi) as f64 + r.gen_range(0.05..0.95)
}

fn batch_shape(c: usize, n: usize, h: usize, w: usize) -> Vec<usize> {
    if n == 1 {
        vec![c, h, w]
    } else {
        vec![c, n, h, w]
    }
}

fn tiny_stereo(r: &mut ChaCha8Rng) -> StereoNet<f64> {
    let cfg = NetConfig {
        feature_widths: vec![3, 3, 3, 4],
        similarity_growth: 2,
        ..NetConfig::default()
    };
    let mut net = StereoNet::<f64>::new(&cfg, r);
    // non-zero offsets so the deformable path is really exercised
    if let SimilarityHead::Deformable { offsets, .. } = &mut net.similarity.head {
        offsets.weight = Tensor::uniform(offsets.weight.shape().to_vec(), 0.3, r);
        offsets.bias = Tensor::uniform(offsets.bias.shape().to_vec(), 1.5, r);
    }
    net
}

type Trial = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

fn gradient_trials() -> Vec<(&'static str, Trial)> {
    let fine = GradCheck {
        step: 1e-6,
        max_entries: Some(24),
        ..GradCheck::default()
    };
    let coarse = GradCheck {
        step: 1e-5,
        max_entries: Some(24),
        ..GradCheck::default()
    };
    vec![
        (
            "conv2d",
            Box::new(move |r: &mut ChaCha8Rng| {
                let (c, o, n) = (r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=2));
                let (h, w) = (r.gen_range(3..=6), r.gen_range(3..=6));
                let pad = if r.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
                let inputs = [
                    Tensor::uniform(batch_shape(c, n, h, w), 1.0, r),
                    Tensor::uniform([o, c, 3, 3], 1.0, r),
                    Tensor::uniform([o], 1.0, r),
                ];
                check_inputs(&inputs, &coarse, |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], pad)?;
                    reduce(t, y)
                })
            }),
        ),
        (
            "tanh",
            Box::new(move |r: &mut ChaCha8Rng| {
                let n = r.gen_range(1..=20);
                let inputs = [Tensor::uniform([n], 2.0, r)];
                check_inputs(&inputs, &coarse, |t, v| {
                    let y = t.tanh(v[0]);
                    reduce(t, y)
                })
            }),
        ),
        (
            "concat",
            Box::new(move |r: &mut ChaCha8Rng| {
                let (h, w) = (r.gen_range(1..=4), r.gen_range(1..=4));
                let inputs = [
                    Tensor::uniform([r.gen_range(1..=3), h, w], 1.0, r),
                    Tensor::uniform([r.gen_range(1..=3), h, w], 1.0, r),
                ];
                check_inputs(&inputs, &coarse, |t, v| {
                    let y = t.concat(v[0], v[1])?;
                    reduce(t, y)
                })
            }),
        ),
        (
            "bilinear_sample",
            Box::new(move |r: &mut ChaCha8Rng| {
                let (c, h, w) = (r.gen_range(1..=3), r.gen_range(2..=5), r.gen_range(2..=5));
                let inputs = [
                    Tensor::uniform([c, h, w], 1.0, r),
                    Tensor::scalar(smooth(r, -1, h as i32 - 1)),
                    Tensor::scalar(smooth(r, -1, w as i32 - 1)),
                ];
                check_inputs(&inputs, &fine, |t, v| {
                    let y = t.bilinear(v[0], v[1], v[2])?;
                    reduce(t, y)
                })
            }),
        ),
        (
            "deformable_conv2d",
            Box::new(move |r: &mut ChaCha8Rng| {
                let (c, o, n) = (r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=2));
                let (h, w) = (r.gen_range(3..=5), r.gen_range(3..=5));
                let pad = if r.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
                let bounds = if r.gen_bool(0.5) { SampleBounds::Image } else { SampleBounds::Window };
                let (oh, ow) = (pad.output_len(h, 3).unwrap(), pad.output_len(w, 3).unwrap());
                let offsets = Tensor::from_fn(batch_shape(18, n, oh, ow), |_| smooth(r, -2, 1));
                let inputs = [
                    Tensor::uniform(batch_shape(c, n, h, w), 1.0, r),
                    offsets,
                    Tensor::uniform([o, c, 3, 3], 1.0, r),
                    Tensor::uniform([o], 1.0, r),
                ];
                check_inputs(&inputs, &fine, |t, v| {
                    let y = t.deform_conv2d_bounded(v[0], v[1], v[2], v[3], pad, bounds)?;
                    reduce(t, y)
                })
            }),
        ),
        (
            "softmax_weighted_ce",
            Box::new(move |r: &mut ChaCha8Rng| {
                let n = r.gen_range(1..=4);
                let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..10)).collect();
                let weights: Vec<f64> = (0..n).map(|_| r.gen_range(0.2..3.0)).collect();
                let shape = if n == 1 { vec![10] } else { vec![10, n] };
                let inputs = [Tensor::uniform(shape, 3.0, r)];
                check_inputs(&inputs, &coarse, |t, v| {
                    let p = t.softmax(v[0])?;
                    t.weighted_cross_entropy_batch(p, labels.clone(), weights.clone())
                })
            }),
        ),
        (
            "hinge_composition",
            Box::new(move |r: &mut ChaCha8Rng| {
                let n = r.gen_range(1..=8);
                let (mut p, mut q) = (Vec::new(), Vec::new());
                while p.len() < n {
                    let (a, b): (f64, f64) = (r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
                    // keep clear of the kink at margin + b - a = 0
                    if (0.2 + b - a).abs() > 1e-3 {
                        p.push(a);
                        q.push(b);
                    }
                }
                let inputs = [Tensor::new([n], p)?, Tensor::new([n], q)?];
                check_inputs(&inputs, &coarse, |t, v| {
                    let a = t.tanh(v[0]);
                    let b = t.tanh(v[1]);
                    let h = t.hinge(a, b, 0.2)?;
                    t.mean_all(h)
                })
            }),
        ),
        (
            "similarity_path",
            Box::new(move |r: &mut ChaCha8Rng| {
                let net = tiny_stereo(r);
                let params: Vec<Tensor<f64>> = net.named_params().into_iter().map(|(_, t)| t.clone()).collect();
                let fe_count = net.features.named_params().len();
                let n = 2;
                let patches: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::uniform([3, n, 21, 21], 1.0, r)).collect();
                let check = GradCheck {
                    max_entries: Some(6),
                    seed: r.gen(),
                    ..fine
                };
                check_inputs(&params, &check, |t, v| {
                    let fe = Bound {
                        vars: v[..fe_count].to_vec(),
                    };
                    let sim = Bound {
                        vars: v[fe_count..].to_vec(),
                    };
                    let feats = patches
                        .iter()
                        .map(|p| {
                            let x = t.constant(p);
                            net.features.forward(t, &fe, x, Padding::Valid)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let sp = net.similarity.forward(t, &sim, feats[0], feats[1], Padding::Valid)?;
                    let sn = net.similarity.forward(t, &sim, feats[0], feats[2], Padding::Valid)?;
                    let h = t.hinge(sp, sn, 0.2)?;
                    t.mean_all(h)
                })
            }),
        ),
        (
            "completion_path",
            Box::new(move |r: &mut ChaCha8Rng| {
                let net = DcNet::<f64>::new([4, 4], r);
                let n = 3;
                let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..GATHER_COUNT)).collect();
                let weights: Vec<f64> = (0..n).map(|_| r.gen_range(0.2..3.0)).collect();
                let mut inputs: Vec<Tensor<f64>> = net.named_params().into_iter().map(|(_, t)| t.clone()).collect();
                inputs.push(Tensor::uniform([DC_CHANNELS, n, DC_PATCH, DC_PATCH], 1.0, r));
                let check = GradCheck {
                    seed: r.gen(),
                    ..coarse
                };
                check_inputs(&inputs, &check, |t, v| {
                    let bound = Bound {
                        vars: v[..v.len() - 1].to_vec(),
                    };
                    let p = net.forward(t, &bound, v[v.len() - 1])?;
                    t.weighted_cross_entropy_batch(p, labels.clone(), weights.clone())
                })
            }),
        ),
    ]
}

/// Criterion 1.
pub fn gradient_correctness(seed: u64) -> CriterionReport {
    timed(1, "gradient correctness", || {
        let mut log = Vec::new();
        let mut passed = true;
        let mut worst_all: f64 = 0.0;
        for (i, (name, trial)) in gradient_trials().into_iter().enumerate() {
            let mut r = rng(seed, 100 + i as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..GRAD_TRIALS {
                worst = worst.max(trial(&mut r)?);
            }
            let ok = worst < GRAD_TOLERANCE;
            passed &= ok;
            worst_all = worst_all.max(worst);
            log.push(format!("{} trials {} max_rel_err {:.3e} {}", name, GRAD_TRIALS, worst, if ok { "ok" } else { "FAIL" }));
        }
        Ok(Verdict {
            passed,
            detail: format!("9 ops x {} trials, worst relative error {:.2e}", GRAD_TRIALS, worst_all),
            log,
        })
    })
}

fn conv32(x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>, pad: Padding) -> Result<Tensor<f32>> {
    let mut t = Tape::new();
    let (x, w, b) = (t.constant(x), t.constant(w), t.constant(b));
    let y = t.conv2d(x, w, b, pad)?;
    Ok(t.value(y).clone())
}

fn deform32(x: &Tensor<f32>, off: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>, pad: Padding) -> Result<Tensor<f32>> {
    let mut t = Tape::new();
    let (x, o, w, b) = (t.constant(x), t.constant(off), t.constant(w), t.constant(b));
    let y = t.deform_conv2d(x, o, w, b, pad)?;
    Ok(t.value(y).clone())
}

/// Criterion 2.
pub fn deformable_identity(seed: u64) -> CriterionReport {
    timed(2, "deformable identity", || {
        let mut r = rng(seed, 2);
        let (mut zero_err, mut shift_err): (f32, f32) = (0.0, 0.0);
        let mut interior = 0usize;
        for _ in 0..100 {
            let (c, o) = (r.gen_range(1..=4), r.gen_range(1..=4));
            let (h, w) = (r.gen_range(3..=9), r.gen_range(3..=9));
            let pad = if r.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
            let x = Tensor::<f32>::uniform([c, h, w], 1.0, &mut r);
            let wt = Tensor::<f32>::uniform([o, c, 3, 3], 1.0, &mut r);
            let b = Tensor::<f32>::uniform([o], 1.0, &mut r);
            let (oh, ow) = (pad.output_len(h, 3).unwrap(), pad.output_len(w, 3).unwrap());
            let plain = conv32(&x, &wt, &b, pad)?;
            let deformed = deform32(&x, &Tensor::zeros([18, oh, ow]), &wt, &b, pad)?;
            for (a, b) in plain.data().iter().zip(deformed.data()) {
                zero_err = zero_err.max((a - b).abs());
            }

            // constant integer offsets read the input shifted by (dy, dx)
            let (dy, dx) = (r.gen_range(-2i32..=2), r.gen_range(-2i32..=2));
            let off = Tensor::from_fn([18, h, w], |i| if (i / (h * w)) % 2 == 0 { dy as f32 } else { dx as f32 });
            let shifted = x.window(dy as isize, dx as isize, h, w)?;
            let a = deform32(&x, &off, &wt, &b, Padding::Same)?;
            let e = conv32(&shifted, &wt, &b, Padding::Same)?;
            for oc in 0..o {
                for y in 0..h as i32 {
                    for xx in 0..w as i32 {
                        let inside = |v: i32, n: usize| v > 0 && v + 1 < n as i32;
                        if inside(y, h) && inside(xx, w) && inside(y + dy, h) && inside(xx + dx, w) {
                            interior += 1;
                            let (yu, xu) = (y as usize, xx as usize);
                            shift_err = shift_err.max((a.at3(oc, yu, xu) - e.at3(oc, yu, xu)).abs());
                        }
                    }
                }
            }
        }
        let passed = zero_err <= 1e-6 && shift_err <= 1e-5 && interior > 0;
        Ok(Verdict {
            passed,
            detail: format!(
                "zero offsets max diff {:.1e}, integer shift max diff {:.1e} over {} interior px",
                zero_err, shift_err, interior
            ),
            log: vec![format!("zero {:e} shift {:e} interior {}", zero_err, shift_err, interior)],
        })
    })
}

/// Criterion 3.
pub fn receptive_field(seed: u64) -> CriterionReport {
    timed(3, "receptive field", || {
        let mut r = rng(seed, 3);
        let model = Model::new(&NetConfig::default(), r.gen());
        let net = &model.stereo;
        let mut tape = Tape::new();
        let fe = net.features.bind(&mut tape, false);
        let patch = net.patch_size();
        let mut feats = Vec::new();
        for _ in 0..2 {
            let x = tape.leaf(Tensor::<f32>::uniform([3, patch, patch], 1.0, &mut r));
            feats.push(net.features.forward(&mut tape, &fe, x, Padding::Valid)?);
        }
        let score = net
            .similarity
            .score_patches(tape.value(feats[0]), tape.value(feats[1]))?;
        let probs = model
            .dc
            .predict(&[Tensor::uniform([DC_CHANNELS, DC_PATCH, DC_PATCH], 1.0, &mut r)])?;
        let sum: f32 = probs[0].iter().sum();
        let passed = patch == 21 && score.len() == 1 && probs.len() == 1 && (sum - 1.0).abs() < 1e-5;
        Ok(Verdict {
            passed,
            detail: format!(
                "{0}x{0} patch -> score shape {1:?}; 7x7 window -> {2} classes summing to {3:.6}",
                patch,
                score.shape(),
                probs[0].len(),
                sum
            ),
            log: vec![format!("patch {} score {:?} classes {}", patch, score.shape(), probs[0].len())],
        })
    })
}

/// Criterion 4.
pub fn parameter_budget() -> CriterionReport {
    timed(4, "parameter budget", || {
        let m = Model::new(&NetConfig::default(), 0);
        let c = m.param_counts();
        let rank = m.max_param_rank();
        let passed = (330_000..=450_000).contains(&c.total()) && (10_000..=25_000).contains(&c.completion) && rank <= 4;
        let detail = format!(
            "total {} (features {}, similarity {}, completion {}), max rank {}",
            c.total(),
            c.features,
            c.similarity,
            c.completion,
            rank
        );
        Ok(Verdict {
            passed,
            log: vec![detail.clone()],
            detail,
        })
    })
}

/// Criterion 5: trained similarity against the cosine ablation, on one core.
/// Also returns the trained run for criterion 8.
pub fn synthetic_overfit(cfg: &OverfitConfig, seed: u64) -> (CriterionReport, Option<OverfitRun>) {
    let mut kept = None;
    let report = timed(5, "synthetic overfit", || {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let t0 = std::time::Instant::now();
        let (trained, cosine) = pool.install(|| -> Result<_> {
            Ok((
                overfit_pair(cfg, SimilarityMode::Trained, seed)?,
                overfit_pair(cfg, SimilarityMode::Cosine, seed)?,
            ))
        })?;
        let secs = t0.elapsed().as_secs_f64();
        let passed = cfg.steps <= 2000 && trained.accuracy >= 0.9 && trained.accuracy > cosine.accuracy && secs <= 600.0;
        let detail = format!(
            "{} steps: trained {:.1}% vs cosine {:.1}% within 1 px, {:.0}s on one thread",
            cfg.steps,
            100.0 * trained.accuracy,
            100.0 * cosine.accuracy,
            secs
        );
        let mut log: Vec<String> = trained.log.iter().map(|l| format!("trained {}", l)).collect();
        log.extend(cosine.log.iter().map(|l| format!("cosine {}", l)));
        kept = Some(trained);
        Ok(Verdict { passed, detail, log })
    });
    (report, kept)
}

fn random_sparse(r: &mut ChaCha8Rng) -> DisparityMap {
    let (w, h) = (r.gen_range(1..=24), r.gen_range(1..=8));
    let density = r.gen_range(0.05..0.9);
    let mut m = DisparityMap::invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            if r.gen_bool(density) {
                m.set(x, y, r.gen_range(0..12) as f32);
            }
        }
    }
    m
}

/// Criterion 6.
pub fn completion_oracle(seed: u64) -> CriterionReport {
    timed(6, "completion oracle", || {
        let mut r = rng(seed, 6);
        let (mut pixels, mut mismatches) = (0usize, 0usize);
        let (mut border, mut exhausted, mut ties, mut discards, mut absent) = (0usize, 0usize, 0usize, 0usize, 0usize);
        for _ in 0..1000 {
            let m = random_sparse(&mut r);
            for y in 0..m.height() {
                for x in 0..m.width() {
                    if m.is_valid(x, y) {
                        continue;
                    }
                    pixels += 1;
                    let got = gather_valid(&m, x, y)?.map(|g| g.values.to_vec());
                    let want = gather_reference(&m, x, y);
                    if got != want {
                        mismatches += 1;
                        continue;
                    }
                    let Some(values) = want else {
                        absent += 1;
                        continue;
                    };
                    if x == 0 || x + 1 == m.width() {
                        border += 1;
                    }
                    let lefts = (0..x).filter(|c| m.is_valid(*c, y)).count();
                    let rights = (x + 1..m.width()).filter(|c| m.is_valid(*c, y)).count();
                    if lefts.min(rights) < 5 && lefts + rights > 0 {
                        exhausted += 1;
                    }
                    for _ in 0..3 {
                        let base = values[r.gen_range(0..GATHER_COUNT)];
                        let d_gt = base + r.gen_range(-6i32..=6) as f32 * 0.5;
                        let got = make_label(&values, d_gt, 2.0);
                        let want = label_reference(&values, d_gt, 2.0);
                        if got != want {
                            mismatches += 1;
                        }
                        match want {
                            None => discards += 1,
                            Some(c) => {
                                let best = (values[c] - d_gt).abs();
                                if values.iter().filter(|v| (*v - d_gt).abs() == best).count() > 1 {
                                    ties += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        let covered = border > 0 && exhausted > 0 && ties > 0 && discards > 0 && absent > 0;
        let detail = format!(
            "{} holes, {} mismatches; border {}, exhausted side {}, ties {}, discards {}, absent {}",
            pixels, mismatches, border, exhausted, ties, discards, absent
        );
        Ok(Verdict {
            passed: mismatches == 0 && covered,
            log: vec![detail.clone()],
            detail,
        })
    })
}

/// Completion inputs whose class is the gather channel with the largest
/// window mean. The true channel is raised, so the rule is clear-cut.
pub fn learnable_pattern(count: usize, r: &mut ChaCha8Rng) -> Vec<DcSample<f32>> {
    let plane = DC_PATCH * DC_PATCH;
    (0..count)
        .map(|_| {
            let hot = r.gen_range(0..GATHER_COUNT);
            let mut data: Vec<f32> = (0..DC_CHANNELS * plane).map(|_| r.gen_range(-1.0..1.0)).collect();
            data[hot * plane..(hot + 1) * plane].iter_mut().for_each(|v| *v += 1.0);
            let mean = |c: usize| data[c * plane..(c + 1) * plane].iter().sum::<f32>();
            let label = (0..GATHER_COUNT).fold(0, |best, c| if mean(c) > mean(best) { c } else { best });
            DcSample {
                input: Tensor::new([DC_CHANNELS, DC_PATCH, DC_PATCH], data).expect("sized"),
                label,
            }
        })
        .collect()
}

fn stereo_bytes(model: &Model) -> Vec<u8> {
    let mut ck = model.to_checkpoint();
    ck.tensors.retain(|(n, _)| !n.starts_with("dc."));
    ck.to_bytes()
}

/// Runs up to `max_steps` completion steps at the recipe's rate and batch
/// size, stopping once training accuracy reaches `target`.
pub fn train_completion_on_pattern(
    model: &mut Model,
    samples: &[DcSample<f32>],
    max_steps: usize,
    target: f64,
    r: &mut ChaCha8Rng,
    log: &mut Vec<String>,
) -> Result<(usize, f64)> {
    let mut trainer = DcTrainer::for_samples(model.dc.clone(), samples, AdamConfig::with_lr(6.0e-6))?;
    let mut acc = trainer.accuracy(samples)?;
    let mut steps = 0;
    while steps < max_steps && acc < target {
        let batch: Vec<DcSample<f32>> = (0..1000).map(|_| samples[r.gen_range(0..samples.len())].clone()).collect();
        let loss = trainer.step(&batch)?.loss();
        steps += 1;
        if steps % 100 == 0 {
            acc = trainer.accuracy(samples)?;
            log.push(format!("step {} loss {:.6} accuracy {:.4}", steps, loss.unwrap_or(f64::NAN), acc));
        }
    }
    model.dc = trainer.net;
    Ok((steps, acc))
}

/// Criterion 7.
pub fn completion_training(seed: u64) -> CriterionReport {
    timed(7, "completion training", || {
        let mut r = rng(seed, 7);
        let samples = learnable_pattern(5000, &mut r);
        let mut model = Model::new(&OverfitConfig::default().net, r.gen());
        let before = stereo_bytes(&model);
        let mut log = Vec::new();
        let (steps, acc) = train_completion_on_pattern(&mut model, &samples, 3000, 0.9, &mut r, &mut log)?;
        let frozen = stereo_bytes(&model) == before;
        Ok(Verdict {
            passed: acc >= 0.9 && steps <= 3000 && frozen,
            detail: format!(
                "{:.1}% training accuracy after {} steps; stereo weights {}",
                100.0 * acc,
                steps,
                if frozen { "byte-identical" } else { "CHANGED" }
            ),
            log,
        })
    })
}

/// Criterion 8.
pub fn completion_benefit(cfg: &OverfitConfig, trained: Option<&OverfitRun>, seed: u64) -> CriterionReport {
    timed(8, "completion benefit", || {
        let run = trained.ok_or_else(|| Error::InvalidArgument("no trained stereo network".into()))?;
        let d_max = cfg.scene.d_max;
        let mut r = rng(seed, 8);
        // completion examples from the training pair and two more scenes
        let mut samples = Vec::new();
        let mut pairs = vec![run.pair.clone()];
        for _ in 0..2 {
            pairs.push(generate_pair(&cfg.scene, &mut r)?);
        }
        for p in &pairs {
            let out = run.net.disparity(&p.left, &p.right, d_max, run.mode, DEFAULT_TAU)?;
            samples.extend(labelled_holes(&out.consistent, &p.left, &p.gt, 2.0)?.samples);
        }
        let mut log = vec![format!("completion samples {}", samples.len())];
        let mut dc = DcNet::<f32>::new(cfg.net.dc_widths, &mut r);
        if !samples.is_empty() {
            let mut trainer = DcTrainer::for_samples(dc, &samples, AdamConfig::with_lr(6.0e-6))?;
            for _ in 0..200 {
                let batch: Vec<_> = (0..samples.len().min(1000))
                    .map(|_| samples[r.gen_range(0..samples.len())].clone())
                    .collect();
                trainer.step(&batch)?;
            }
            log.push(format!("completion accuracy {:.4}", trainer.accuracy(&samples)?));
            dc = trainer.net;
        }
        let (mut sparse_sum, mut filled_sum) = (0.0, 0.0);
        let held_out = 3;
        for i in 0..held_out {
            let p = generate_pair(&cfg.scene, &mut r)?;
            let out = run.net.disparity(&p.left, &p.right, d_max, run.mode, DEFAULT_TAU)?;
            let filled = fill_disparities(&out.consistent, &p.left, &dc)?;
            let sparse = n_point_error(&out.consistent, &p.gt, 4.0, InvalidPolicy::CountAsError, None)?;
            let dense = n_point_error(&filled, &p.gt, 4.0, InvalidPolicy::CountAsError, None)?;
            log.push(format!(
                "pair {} density {:.4} sparse 4-PE {:.4} filled 4-PE {:.4}",
                i,
                out.consistent.density(),
                sparse,
                dense
            ));
            sparse_sum += sparse;
            filled_sum += dense;
        }
        let (sparse, filled) = (sparse_sum / held_out as f64, filled_sum / held_out as f64);
        Ok(Verdict {
            passed: filled <= sparse,
            detail: format!("4-PE on {} held-out pairs: filled {:.2}% vs sparse {:.2}%", held_out, filled, sparse),
            log,
        })
    })
}

fn random_map(r: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> DisparityMap {
    let mut m = DisparityMap::invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            if r.gen_bool(density) {
                // half-pixel grid, so differences land exactly on thresholds
                m.set(x, y, r.gen_range(0..40) as f32 * 0.5);
            }
        }
    }
    m
}

fn temp_path(name: &str) -> std::path::PathBuf {
    std::env::temp_dir().join(format!("fcdsn-selftest-{}-{}", std::process::id(), name))
}

/// Criterion 9.
pub fn metric_and_io_oracles(seed: u64) -> CriterionReport {
    timed(9, "metric and io oracles", || {
        let mut r = rng(seed, 9);
        let mut failures = Vec::new();

        let (mut compared, mut monotone) = (0usize, true);
        for _ in 0..200 {
            let (w, h) = (r.gen_range(1..=16), r.gen_range(1..=16));
            let gt = random_map(&mut r, w, h, 0.8);
            let pred = random_map(&mut r, w, h, 0.7);
            for policy in [InvalidPolicy::CountAsError, InvalidPolicy::Exclude] {
                let mut last = f64::INFINITY;
                for n in PE_THRESHOLDS.iter().copied().chain([r.gen_range(0.0..5.0)]) {
                    let got = n_point_error(&pred, &gt, n, policy, None).ok();
                    let want = n_pe_reference(&pred, &gt, n, policy == InvalidPolicy::CountAsError);
                    compared += 1;
                    if got != want {
                        failures.push(format!("n-PE {} vs {:?} at n={}", got.unwrap_or(-1.0), want, n));
                    }
                    if PE_THRESHOLDS.contains(&n) {
                        if let Some(v) = got {
                            monotone &= v <= last;
                            last = v;
                        }
                    }
                }
            }
        }
        if !monotone {
            failures.push("n-PE increased with n".into());
        }

        let mut pfm_cases = 0;
        for i in 0..20 {
            let (w, h, c) = (r.gen_range(1..=9), r.gen_range(1..=9), if i % 2 == 0 { 1 } else { 3 });
            let mut data: Vec<f32> = (0..w * h * c).map(|_| r.gen_range(-1e3..1e3)).collect();
            data[0] = f32::INFINITY;
            let buf = ImageBuffer::new(w, h, c, Samples::F32(data.clone()))?;
            let path = temp_path("map.pfm");
            crate::io::write_pfm(&buf, &path)?;
            let back = crate::io::read_pfm(&path)?;
            let _ = std::fs::remove_file(&path);
            let reference = decode_pfm(&pfm_reference_writer(w, h, c, &data))?;
            let bits = |b: &ImageBuffer| match &b.samples {
                Samples::F32(v) => v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                Samples::U8(_) => Vec::new(),
            };
            let want: Vec<u32> = data.iter().map(|x| x.to_bits()).collect();
            if bits(&back) != want || bits(&reference) != want || back.channels != c || encode_pfm(&back)? != encode_pfm(&buf)? {
                failures.push(format!("pfm case {} differs", i));
            }
            pfm_cases += 1;
        }

        let mut png_err: f32 = 0.0;
        for _ in 0..10 {
            let (w, h) = (r.gen_range(1..=20), r.gen_range(1..=20));
            let mut m = DisparityMap::invalid(w, h);
            for y in 0..h {
                for x in 0..w {
                    if r.gen_bool(0.8) {
                        m.set(x, y, r.gen_range(1.0 / 256.0..255.99));
                    }
                }
            }
            let path = temp_path("disp.png");
            write_disparity_png16(&m, &path)?;
            let back = read_disparity_png16(&path)?;
            let _ = std::fs::remove_file(&path);
            if back.mask() != m.mask() {
                failures.push("png16 validity mask changed".into());
            }
            for (a, b) in m.values().iter().zip(back.values()) {
                png_err = png_err.max((a - b).abs());
            }
        }
        if png_err > 1.0 / 512.0 {
            failures.push(format!("png16 error {}", png_err));
        }

        let model = Model::new(&OverfitConfig::default().net, r.gen());
        let bytes = model.to_checkpoint().to_bytes();
        let path = temp_path("model.fdsn");
        model.save(&path)?;
        let reloaded = Model::load(&path)?;
        let on_disk = std::fs::read(&path)?;
        let _ = std::fs::remove_file(&path);
        if on_disk != bytes || reloaded.to_checkpoint().to_bytes() != bytes || Checkpoint::from_bytes(&bytes)?.to_bytes() != bytes {
            failures.push("checkpoint round trip changed bytes".into());
        }

        let detail = format!(
            "{} n-PE comparisons, {} PFM round trips, PNG16 max error {:.2e}, checkpoint {} bytes{}",
            compared,
            pfm_cases,
            png_err,
            bytes.len(),
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        );
        Ok(Verdict {
            passed: failures.is_empty(),
            log: vec![detail.clone()],
            detail,
        })
    })
}

/// Criterion 10: the reproducible parts of two identical runs agree.
pub fn determinism(cfg: &OverfitConfig, seed: u64) -> CriterionReport {
    timed(10, "determinism", || {
        let short = OverfitConfig {
            steps: 20,
            log_every: 5,
            ..cfg.clone()
        };
        let run = || -> Result<(Vec<String>, Vec<u8>)> {
            let mut log = Vec::new();
            let o = overfit_pair(&short, SimilarityMode::Trained, seed)?;
            log.extend(o.log);
            let mut model = Model::new(&short.net, seed);
            model.stereo = o.net;
            let mut r = rng(seed, 10);
            let samples = learnable_pattern(500, &mut r);
            train_completion_on_pattern(&mut model, &samples, 100, 2.0, &mut r, &mut log)?;
            for c in [completion_oracle(seed), metric_and_io_oracles(seed), receptive_field(seed)] {
                log.extend(c.log);
            }
            Ok((log, model.to_checkpoint().to_bytes()))
        };
        let (log_a, ck_a) = run()?;
        let (log_b, ck_b) = run()?;
        let same = log_a == log_b && ck_a == ck_b;
        Ok(Verdict {
            passed: same,
            detail: format!(
                "{} log lines and a {}-byte checkpoint {} across two runs",
                log_a.len(),
                ck_a.len(),
                if same { "identical" } else { "DIFFER" }
            ),
            log: log_a,
        })
    })
}
