//! Patch-triple sampling and joint training of the feature extractor and the
//! similarity network with a margin hinge loss.

use rand::Rng;

use crate::disparity::DisparityMap;
use crate::engine::{AdamConfig, AdamState, Padding, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::net::layers::{Bound, Module};
use crate::net::{SimilarityMode, StereoNet};
use crate::scalar::Scalar;

/// Margin between matching and non-matching similarity.
pub const HINGE_MARGIN: f64 = 0.2;

/// Triples recorded per tape; keeps the unfolded matrices cache-sized.
const CHUNK: usize = 20;

/// Range of `|o_neg|`, the horizontal displacement of the negative patch.
pub const NEGATIVE_OFFSET_RANGE: (i32, i32) = (2, 8);

/// A normalised stereo pair with left-view ground truth.
#[derive(Clone, Debug)]
pub struct StereoSample<T> {
    pub left: Tensor<T>,
    pub right: Tensor<T>,
    pub gt: DisparityMap,
}

/// Left patch, matching right patch, non-matching right patch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTriple<T> {
    pub left: Tensor<T>,
    pub positive: Tensor<T>,
    pub negative: Tensor<T>,
    pub center: (usize, usize),
    pub disparity: i32,
    pub negative_offset: i32,
}

/// `|o|` uniform in `[2, 8]`, sign uniform.
pub fn draw_negative_offset<R: Rng + ?Sized>(rng: &mut R) -> i32 {
    let m = rng.gen_range(NEGATIVE_OFFSET_RANGE.0..=NEGATIVE_OFFSET_RANGE.1);
    if rng.gen_bool(0.5) {
        m
    } else {
        -m
    }
}

/// Cuts the triple centred at left pixel `(x, y)`. `None` when the pixel has
/// no ground truth or any patch would leave its image.
pub fn triple_at<T: Scalar>(
    sample: &StereoSample<T>,
    x: usize,
    y: usize,
    negative_offset: i32,
    patch: usize,
) -> Result<Option<TrainingTriple<T>>> {
    let (_, h, w) = sample.left.dims3("sample_training_pair")?;
    let Some(d) = sample.gt.get(x, y) else { return Ok(None) };
    let d = d.round() as i64;
    let r = (patch / 2) as i64;
    let fits = |cx: i64, cy: i64| cx - r >= 0 && cy - r >= 0 && cx + r < w as i64 && cy + r < h as i64;
    let (x, y) = (x as i64, y as i64);
    let xp = x - d;
    let xn = xp + negative_offset as i64;
    if !(fits(x, y) && fits(xp, y) && fits(xn, y)) {
        return Ok(None);
    }
    let cut = |img: &Tensor<T>, cx: i64| img.window((y - r) as isize, (cx - r) as isize, patch, patch);
    Ok(Some(TrainingTriple {
        left: cut(&sample.left, x)?,
        positive: cut(&sample.right, xp)?,
        negative: cut(&sample.right, xn)?,
        center: (x as usize, y as usize),
        disparity: d as i32,
        negative_offset,
    }))
}

/// Draws one triple from a random scene and pixel; `None` if the draw had
/// to be skipped (no ground truth or out of bounds).
pub fn sample_training_pair<T: Scalar, R: Rng + ?Sized>(
    samples: &[StereoSample<T>],
    patch: usize,
    rng: &mut R,
) -> Result<Option<TrainingTriple<T>>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training scenes".into()));
    }
    let s = &samples[rng.gen_range(0..samples.len())];
    let x = rng.gen_range(0..s.gt.width());
    let y = rng.gen_range(0..s.gt.height());
    let o = draw_negative_offset(rng);
    triple_at(s, x, y, o, patch)
}

/// Draws until `count` triples were produced (at most `100 * count` attempts).
pub fn sample_triples<T: Scalar, R: Rng + ?Sized>(
    samples: &[StereoSample<T>],
    count: usize,
    patch: usize,
    rng: &mut R,
) -> Result<Vec<TrainingTriple<T>>> {
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 100 * count.max(1) {
            return Err(Error::InvalidArgument(
                "could not draw enough in-bounds training patches".into(),
            ));
        }
        if let Some(t) = sample_training_pair(samples, patch, rng)? {
            out.push(t);
        }
    }
    Ok(out)
}

/// Result of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Applied { loss: f64 },
    /// Loss or gradient was not finite; parameters untouched.
    Skipped,
}

impl StepOutcome {
    pub fn loss(self) -> Option<f64> {
        match self {
            StepOutcome::Applied { loss } => Some(loss),
            StepOutcome::Skipped => None,
        }
    }
}

/// Joint optimiser over both stereo sub-networks.
pub struct JointTrainer<T: Scalar> {
    pub net: StereoNet<T>,
    pub mode: SimilarityMode,
    adam: AdamState<T>,
}

impl<T: Scalar> JointTrainer<T> {
    pub fn new(net: StereoNet<T>, mode: SimilarityMode, config: AdamConfig) -> Self {
        let adam = AdamState::new(config, net.named_params().into_iter().map(|(_, t)| t));
        JointTrainer { net, mode, adam }
    }

    pub fn steps(&self) -> u64 {
        self.adam.steps_taken()
    }

    /// Stacks patches into one batch, trimmed to the feature extractor's
    /// receptive field in cosine mode (nothing outside it reaches the
    /// centre feature vector).
    fn patch_batch(&self, tape: &mut Tape<T>, patches: Vec<&Tensor<T>>) -> Result<Var> {
        let owned: Vec<Tensor<T>> = patches.into_iter().cloned().collect();
        let v = tape.leaf(Tensor::stack(&owned)?);
        match self.mode {
            SimilarityMode::Trained => Ok(v),
            SimilarityMode::Cosine => {
                let rf = self.net.features.receptive_field();
                tape.center_crop(v, rf, rf)
            }
        }
    }

    fn score(&self, tape: &mut Tape<T>, sim: &Bound, left: Var, right: Var) -> Result<Var> {
        match self.mode {
            SimilarityMode::Trained => self.net.similarity.forward(tape, sim, left, right, Padding::Valid),
            SimilarityMode::Cosine => tape.cosine(left, right),
        }
    }

    /// Mean hinge loss of the batch without updating anything.
    pub fn batch_loss(&self, batch: &[TrainingTriple<T>]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in batch.chunks(CHUNK) {
            let mut tape = Tape::new();
            let (fe, sim) = self.bind(&mut tape, false);
            let loss = self.record_loss(&mut tape, &fe, &sim, chunk)?;
            total += tape.value(loss).data()[0].to_f64_lossy() * chunk.len() as f64;
        }
        Ok(total / batch.len().max(1) as f64)
    }

    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> (Bound, Bound) {
        let fe = self.net.features.bind(tape, trainable);
        let sim = match self.mode {
            SimilarityMode::Trained => self.net.similarity.bind(tape, trainable),
            SimilarityMode::Cosine => Default::default(),
        };
        (fe, sim)
    }

    fn record_loss(&self, tape: &mut Tape<T>, fe: &Bound, sim: &Bound, batch: &[TrainingTriple<T>]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let left = self.patch_batch(tape, batch.iter().map(|t| &t.left).collect())?;
        let pos = self.patch_batch(tape, batch.iter().map(|t| &t.positive).collect())?;
        let neg = self.patch_batch(tape, batch.iter().map(|t| &t.negative).collect())?;
        let lf = self.net.features.forward(tape, fe, left, Padding::Valid)?;
        let pf = self.net.features.forward(tape, fe, pos, Padding::Valid)?;
        let nf = self.net.features.forward(tape, fe, neg, Padding::Valid)?;
        let s_pos = self.score(tape, sim, lf, pf)?;
        let s_neg = self.score(tape, sim, lf, nf)?;
        if tape.value(s_pos).len() != batch.len() {
            return Err(Error::shape(
                "joint_train_step",
                format!(
                    "patches must reduce to one score each, got {:?}",
                    tape.value(s_pos).shape()
                ),
            ));
        }
        let h = tape.hinge(s_pos, s_neg, T::lit(HINGE_MARGIN))?;
        tape.mean_all(h)
    }

    /// Forward, backward through both sub-networks, one Adam step.
    ///
    /// The batch is recorded in chunks whose gradients are summed with
    /// weights `chunk / batch`, which equals the gradient of the batch mean.
    pub fn step(&mut self, batch: &[TrainingTriple<T>]) -> Result<StepOutcome> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let mut grads: Vec<Vec<T>> = self.net.named_params().iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        let mut total = 0.0;
        for chunk in batch.chunks(CHUNK) {
            let mut tape = Tape::new();
            let (fe, sim) = self.bind(&mut tape, true);
            let loss = self.record_loss(&mut tape, &fe, &sim, chunk)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                log::warn!("joint step skipped: loss is {}", value);
                return Ok(StepOutcome::Skipped);
            }
            let share = chunk.len() as f64 / batch.len() as f64;
            total += value.to_f64_lossy() * share;
            tape.backward(loss)?;
            let w = T::lit(share);
            for (acc, v) in grads.iter_mut().zip(fe.vars.iter().chain(&sim.vars)) {
                if let Some(g) = tape.grad(*v) {
                    acc.iter_mut().zip(g).for_each(|(a, g)| *a += *g * w);
                }
            }
        }
        // in cosine mode the head is unbound; its zero gradients keep Adam's
        // update at exactly zero
        let mut params = self.net.params_mut();
        for (p, g) in params.iter_mut().zip(grads) {
            p.set_grad(g)?;
        }
        match self.adam.step(params) {
            Ok(()) => Ok(StepOutcome::Applied { loss: total }),
            Err(Error::NonFinite(msg)) => {
                log::warn!("joint step skipped: {}", msg);
                Ok(StepOutcome::Skipped)
            }
            Err(e) => Err(e),
        }
    }
}
