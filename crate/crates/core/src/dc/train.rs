use crate::engine::{AdamConfig, AdamState, Tape, Tensor};
use crate::error::{Error, Result};
use crate::net::train::StepOutcome;
use crate::net::Module;
use crate::scalar::Scalar;

use super::fill::DcSample;
use super::gather::{compute_class_weights, GATHER_COUNT};
use super::net::{argmax, DcNet};

/// Trains the completion network alone. It owns nothing else, so the
/// stereo weights cannot change while it runs.
#[derive(Clone, Debug)]
pub struct DcTrainer<T> {
    pub net: DcNet<T>,
    pub class_weights: [f64; GATHER_COUNT],
    adam: AdamState<T>,
}

impl<T: Scalar> DcTrainer<T> {
    pub fn new(net: DcNet<T>, class_weights: [f64; GATHER_COUNT], adam: AdamConfig) -> Self {
        let state = AdamState::new(adam, net.named_params().into_iter().map(|(_, t)| t));
        DcTrainer {
            net,
            class_weights,
            adam: state,
        }
    }

    /// Trainer whose class weights come from the labels of `samples`.
    pub fn for_samples(net: DcNet<T>, samples: &[DcSample<T>], adam: AdamConfig) -> Result<Self> {
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        Ok(Self::new(net, compute_class_weights(&labels)?, adam))
    }

    pub fn steps(&self) -> u64 {
        self.adam.steps_taken()
    }

    /// Weighted cross-entropy over the batch, averaged over samples, plus
    /// one Adam step.
    pub fn step(&mut self, batch: &[DcSample<T>]) -> Result<StepOutcome> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty completion batch".into()));
        }
        let mut tape = Tape::new();
        let bound = self.net.bind(&mut tape, true);
        let inputs: Vec<Tensor<T>> = batch.iter().map(|s| s.input.clone()).collect();
        let x = tape.leaf(Tensor::stack(&inputs)?);
        let probs = self.net.forward(&mut tape, &bound, x)?;
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let weights = labels.iter().map(|l| T::lit(self.class_weights[*l])).collect();
        let loss = tape.weighted_cross_entropy_batch(probs, labels, weights)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            log::warn!("completion step skipped: loss is {}", value);
            return Ok(StepOutcome::Skipped);
        }
        tape.backward(loss)?;
        self.net.pull_grads(&tape, &bound)?;
        match self.adam.step(self.net.params_mut()) {
            Ok(()) => Ok(StepOutcome::Applied {
                loss: value.to_f64_lossy(),
            }),
            Err(Error::NonFinite(msg)) => {
                log::warn!("completion step skipped: {}", msg);
                Ok(StepOutcome::Skipped)
            }
            Err(e) => Err(e),
        }
    }

    /// Fraction of samples whose label is the network's top class.
    pub fn accuracy(&self, samples: &[DcSample<T>]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no samples to score".into()));
        }
        let mut hits = 0;
        for chunk in samples.chunks(1000) {
            let inputs: Vec<Tensor<T>> = chunk.iter().map(|s| s.input.clone()).collect();
            let probs = self.net.predict(&inputs)?;
            hits += chunk.iter().zip(&probs).filter(|(s, p)| argmax(&p[..]) == s.label).count();
        }
        Ok(hits as f64 / samples.len() as f64)
    }
}
