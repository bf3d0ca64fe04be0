//! Whole-run helpers behind the command-line tool: training loops over scene
//! lists, inference with ablation switches, and pooled evaluation.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Model;
use crate::dc::{fill_disparities, labelled_holes, DcSample, DcTrainer};
use crate::disparity::DisparityMap;
use crate::engine::{AdamConfig, Tensor};
use crate::error::{Error, Result};
use crate::io::Scene;
use crate::metrics::{evaluate, EvalReport, InvalidPolicy};
use crate::net::train::{sample_triples, JointTrainer, StereoSample};
use crate::net::{normalize_image, SimilarityHead, SimilarityMode, StereoNet};

/// Switches for the ablation study. The default is the full pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub similarity: SimilarityMode,
    /// When off, the learned offsets are zeroed so the head acts as a
    /// regular convolution.
    pub deformable: bool,
    pub completion: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            similarity: SimilarityMode::Trained,
            deformable: true,
            completion: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PairOutput {
    pub left: DisparityMap,
    pub right: DisparityMap,
    pub consistent: DisparityMap,
    /// Dense map, present when completion is switched on.
    pub filled: Option<DisparityMap>,
}

impl PairOutput {
    /// The map an evaluation should score: filled when available.
    pub fn final_map(&self) -> &DisparityMap {
        self.filled.as_ref().unwrap_or(&self.consistent)
    }
}

/// Copy of `net` whose deformable offsets are all zero.
pub fn without_offsets(net: &StereoNet<f32>) -> StereoNet<f32> {
    let mut out = net.clone();
    if let SimilarityHead::Deformable { offsets, .. } = &mut out.similarity.head {
        offsets.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        offsets.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

/// Stereo matching, consistency check and (optionally) completion for one
/// pair of unnormalised `3 x H x W` images.
pub fn run_pair(
    model: &Model,
    left: &Tensor<f32>,
    right: &Tensor<f32>,
    d_max: usize,
    tau: f32,
    ablation: &Ablation,
) -> Result<PairOutput> {
    let net = if ablation.deformable {
        Cow::Borrowed(&model.stereo)
    } else {
        Cow::Owned(without_offsets(&model.stereo))
    };
    let out = net.disparity(left, right, d_max, ablation.similarity, tau)?;
    let filled = if ablation.completion {
        Some(fill_disparities(&out.consistent, left, &model.dc)?)
    } else {
        None
    };
    Ok(PairOutput {
        left: out.left,
        right: out.right,
        consistent: out.consistent,
        filled,
    })
}

/// Normalised training samples from the scenes that have ground truth.
pub fn stereo_samples(scenes: &[Scene]) -> Result<Vec<StereoSample<f32>>> {
    scenes
        .iter()
        .filter_map(|s| s.gt.as_ref().map(|gt| (s, gt)))
        .map(|(s, gt)| {
            Ok(StereoSample {
                left: normalize_image(&s.left)?,
                right: normalize_image(&s.right)?,
                gt: gt.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Joint training of feature extractor and similarity network. `on_step`
/// receives the step number and the loss (`None` for a skipped step).
pub fn train_stereo(
    model: &mut Model,
    samples: &[StereoSample<f32>],
    mode: SimilarityMode,
    patch: usize,
    opts: &TrainOptions,
    mut on_step: impl FnMut(usize, Option<f64>),
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no scenes with ground truth to train on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut trainer = JointTrainer::new(model.stereo.clone(), mode, AdamConfig::with_lr(opts.lr));
    for step in 1..=opts.steps {
        let batch = sample_triples(samples, opts.batch, patch, &mut rng)?;
        on_step(step, trainer.step(&batch)?.loss());
    }
    model.stereo = trainer.net;
    model.steps += opts.steps as u64;
    Ok(())
}

/// Labelled holes of the consistency-checked maps of every scene with
/// ground truth, plus the number of discarded holes.
pub fn completion_samples(
    model: &Model,
    scenes: &[Scene],
    d_max: usize,
    tau: f32,
    half_width: f32,
) -> Result<(Vec<DcSample<f32>>, usize)> {
    let mut samples = Vec::new();
    let mut discarded = 0;
    for s in scenes {
        let Some(gt) = &s.gt else { continue };
        let out = model.stereo.disparity(&s.left, &s.right, d_max, SimilarityMode::Trained, tau)?;
        let holes = labelled_holes(&out.consistent, &s.left, gt, half_width)?;
        log::info!(
            "{}: density {:.3}, {} labelled holes, {} discarded",
            s.name,
            out.consistent.density(),
            holes.samples.len(),
            holes.discarded
        );
        samples.extend(holes.samples);
        discarded += holes.discarded;
    }
    Ok((samples, discarded))
}

/// Trains only the completion network; batches are drawn with replacement.
pub fn train_completion(
    model: &mut Model,
    samples: &[DcSample<f32>],
    opts: &TrainOptions,
    mut on_step: impl FnMut(usize, Option<f64>),
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no labelled holes to train on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut trainer = DcTrainer::for_samples(model.dc.clone(), samples, AdamConfig::with_lr(opts.lr))?;
    for step in 1..=opts.steps {
        let batch: Vec<DcSample<f32>> = (0..opts.batch)
            .map(|_| samples[rng.gen_range(0..samples.len())].clone())
            .collect();
        on_step(step, trainer.step(&batch)?.loss());
    }
    model.dc = trainer.net;
    Ok(())
}

/// Scores every scene that has ground truth.
pub fn evaluate_scenes(
    model: &Model,
    scenes: &[Scene],
    d_max: usize,
    tau: f32,
    ablation: &Ablation,
    policy: InvalidPolicy,
) -> Result<Vec<(String, EvalReport)>> {
    let mut out = Vec::new();
    for s in scenes {
        let Some(gt) = &s.gt else { continue };
        let pair = run_pair(model, &s.left, &s.right, d_max, tau, ablation)?;
        out.push((s.name.clone(), evaluate(pair.final_map(), gt, policy, Some(&s.mask))?));
    }
    Ok(out)
}

/// Pixel-weighted pooling of per-scene reports; density is the plain mean.
pub fn pool_reports(reports: &[EvalReport]) -> Option<EvalReport> {
    let first = reports.first()?;
    let evaluated: usize = reports.iter().map(|r| r.evaluated).sum();
    if evaluated == 0 {
        return None;
    }
    let errors = first
        .errors
        .iter()
        .enumerate()
        .map(|(k, (n, _))| {
            let bad: f64 = reports.iter().map(|r| r.errors[k].1 * r.evaluated as f64).sum();
            (*n, bad / evaluated as f64)
        })
        .collect();
    Some(EvalReport {
        errors,
        evaluated,
        excluded: reports.iter().map(|r| r.excluded).sum(),
        density: reports.iter().map(|r| r.density).sum::<f64>() / reports.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;

    #[test]
    fn zeroed_offsets_change_nothing_on_a_fresh_model() {
        // offsets start at zero, so the ablation is the identity until trained
        let model = Model::new(
            &NetConfig {
                feature_widths: vec![3, 3, 3, 4],
                similarity_growth: 2,
                ..NetConfig::default()
            },
            1,
        );
        assert_eq!(without_offsets(&model.stereo), model.stereo);
    }

    #[test]
    fn pooling_weights_by_pixels() {
        let r = |e: f64, n: usize| EvalReport {
            errors: vec![(1.0, e)],
            evaluated: n,
            excluded: 1,
            density: 0.5,
        };
        let p = pool_reports(&[r(10.0, 100), r(40.0, 300)]).unwrap();
        assert_eq!(p.errors, vec![(1.0, 32.5)]);
        assert_eq!((p.evaluated, p.excluded), (400, 2));
        assert!(pool_reports(&[]).is_none());
    }
}
