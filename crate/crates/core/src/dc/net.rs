use rand::Rng;

use crate::engine::{Padding, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::net::layers::{layer_params, layer_params_mut};
use crate::net::{Bound, ConvLayer, Module};
use crate::scalar::Scalar;

use super::gather::GATHER_COUNT;

/// Gather channels plus RGB.
pub const DC_CHANNELS: usize = GATHER_COUNT + 3;
/// Side of the completion input window.
pub const DC_PATCH: usize = 7;

/// Three valid 3x3 convolutions (`7 -> 5 -> 3 -> 1`) with tanh between them,
/// then a softmax over the ten gather positions.
#[derive(Clone, Debug, PartialEq)]
pub struct DcNet<T> {
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Scalar> DcNet<T> {
    pub fn new<R: Rng + ?Sized>(widths: [usize; 2], rng: &mut R) -> Self {
        DcNet {
            layers: vec![
                ConvLayer::he_uniform(DC_CHANNELS, widths[0], 3, rng),
                ConvLayer::he_uniform(widths[0], widths[1], 3, rng),
                ConvLayer::he_uniform(widths[1], GATHER_COUNT, 3, rng),
            ],
        }
    }

    pub fn zeros(widths: [usize; 2]) -> Self {
        DcNet {
            layers: vec![
                ConvLayer::zeros(DC_CHANNELS, widths[0], 3),
                ConvLayer::zeros(widths[0], widths[1], 3),
                ConvLayer::zeros(widths[1], GATHER_COUNT, 3),
            ],
        }
    }

    pub fn widths(&self) -> [usize; 2] {
        [self.layers[0].outputs(), self.layers[1].outputs()]
    }

    /// Class probabilities `10 x N x 1 x 1` for a `13 x N x 7 x 7` batch
    /// (or `10 x 1 x 1` for a single `13 x 7 x 7` input).
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, input: Var) -> Result<Var> {
        let (c, _, h, w) = tape.value(input).dims4("dc_forward")?;
        if c != DC_CHANNELS {
            return Err(Error::shape(
                "dc_forward",
                format!("expected {} input channels, got {}", DC_CHANNELS, c),
            ));
        }
        if h != DC_PATCH || w != DC_PATCH {
            return Err(Error::shape(
                "dc_forward",
                format!("expected {0}x{0} windows, got {1}x{2}", DC_PATCH, h, w),
            ));
        }
        let mut x = input;
        for i in 0..self.layers.len() {
            let (wv, bv) = bound.layer(i);
            x = tape.conv2d(x, wv, bv, Padding::Valid)?;
            if i + 1 < self.layers.len() {
                x = tape.tanh(x);
            }
        }
        tape.softmax(x)
    }

    /// Probabilities for a batch of inputs, one row of ten per input.
    pub fn predict(&self, inputs: &[Tensor<T>]) -> Result<Vec<[T; GATHER_COUNT]>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.leaf(Tensor::stack(inputs)?);
        let p = self.forward(&mut tape, &bound, x)?;
        let probs = tape.value(p).data();
        let n = inputs.len();
        Ok((0..n)
            .map(|j| {
                let mut row = [T::zero(); GATHER_COUNT];
                for (c, r) in row.iter_mut().enumerate() {
                    *r = probs[c * n + j];
                }
                row
            })
            .collect())
    }
}

/// Index of the largest probability; ties go to the lower class.
pub fn argmax<T: Scalar>(probs: &[T]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> Module<T> for DcNet<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        layer_params("dc", &self.layers)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        layer_params_mut(&mut self.layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_widths_hold_about_sixteen_thousand_parameters() {
        let net = DcNet::<f32>::zeros([32, 32]);
        assert_eq!(net.param_count(), 3776 + 9248 + 2890);
    }

    #[test]
    fn zero_network_is_uniform() {
        let net = DcNet::<f64>::zeros([4, 4]);
        let p = net.predict(&[Tensor::zeros([DC_CHANNELS, DC_PATCH, DC_PATCH])]).unwrap();
        assert!(p[0].iter().all(|v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DcNet::<f32>::new([32, 32], &mut rng);
        let inputs: Vec<_> = (0..5)
            .map(|_| Tensor::uniform([DC_CHANNELS, DC_PATCH, DC_PATCH], 3.0, &mut rng))
            .collect();
        for row in net.predict(&inputs).unwrap() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let net = DcNet::<f32>::zeros([4, 4]);
        assert!(net.predict(&[Tensor::zeros([12, DC_PATCH, DC_PATCH])]).is_err());
        assert!(net.predict(&[Tensor::zeros([DC_CHANNELS, 9, 9])]).is_err());
    }

    #[test]
    fn argmax_prefers_lower_class_on_ties() {
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    }
}
