use rand::Rng;

use crate::engine::{Padding, SampleBounds, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::net::layers::{dense_forward, layer_params, layer_params_mut, Bound, ConvLayer, Module};
use crate::scalar::Scalar;

/// Final block of the similarity network.
#[derive(Clone, Debug, PartialEq)]
pub enum SimilarityHead<T> {
    /// A sibling convolution predicts 18 offset channels, which steer a 3x3
    /// deformable convolution down to one channel. Taps sample only inside
    /// the regular 3x3 window, so full-image scores equal patch scores.
    Deformable { offsets: ConvLayer<T>, deform: ConvLayer<T> },
    /// Regular 3x3 convolution of the same weight shape (ablation).
    Plain(ConvLayer<T>),
}

/// Learned similarity: five densely connected 3x3 convolutions over the
/// channel concatenation of left and right features, then the head and a tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityNet<T> {
    pub dense: Vec<ConvLayer<T>>,
    pub head: SimilarityHead<T>,
}

impl<T: Scalar> SimilarityNet<T> {
    pub fn new<R: Rng + ?Sized>(
        feature_dim: usize,
        growth: usize,
        layers: usize,
        deformable: bool,
        rng: &mut R,
    ) -> Self {
        let mut inputs = 2 * feature_dim;
        let dense = (0..layers)
            .map(|_| {
                let l = ConvLayer::he_uniform(inputs, growth, 3, rng);
                inputs += growth;
                l
            })
            .collect();
        let head = if deformable {
            SimilarityHead::Deformable {
                offsets: ConvLayer::zeros(inputs, 18, 3),
                deform: ConvLayer::he_uniform(inputs, 1, 3, rng),
            }
        } else {
            SimilarityHead::Plain(ConvLayer::he_uniform(inputs, 1, 3, rng))
        };
        SimilarityNet { dense, head }
    }

    pub fn feature_dim(&self) -> usize {
        self.dense.first().map_or(0, |l| l.inputs() / 2)
    }

    pub fn is_deformable(&self) -> bool {
        matches!(self.head, SimilarityHead::Deformable { .. })
    }

    pub fn receptive_field(&self) -> usize {
        1 + 2 * (self.dense.len() + 1)
    }

    /// Score map for concatenated `left` and `right` feature maps.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, left: Var, right: Var, padding: Padding) -> Result<Var> {
        let (cl, nl, hl, wl) = tape.value(left).dims4("similarity_score")?;
        let (cr, nr, hr, wr) = tape.value(right).dims4("similarity_score")?;
        if (nl, hl, wl) != (nr, hr, wr) {
            return Err(Error::shape(
                "similarity_score",
                format!("feature maps differ in size: {}x{}x{} vs {}x{}x{}", nl, hl, wl, nr, hr, wr),
            ));
        }
        let want = self.feature_dim();
        if cl != want || cr != want {
            return Err(Error::shape(
                "similarity_score",
                format!("expected {}-channel features, got {} and {}", want, cl, cr),
            ));
        }
        let input = tape.concat(left, right)?;
        let n = self.dense.len();
        let layers: Vec<(Var, Var)> = (0..n).map(|i| bound.layer(i)).collect();
        let (_, stack) = dense_forward(tape, &layers, input, padding)?;
        let score = match self.head {
            SimilarityHead::Deformable { .. } => {
                let (ow, ob) = bound.layer(n);
                let (dw, db) = bound.layer(n + 1);
                let offsets = tape.conv2d(stack, ow, ob, padding)?;
                // taps stay inside the 3x3 window, the whole input of the
                // head during valid patch training
                tape.deform_conv2d_bounded(stack, offsets, dw, db, padding, SampleBounds::Window)?
            }
            SimilarityHead::Plain(_) => {
                let (w, b) = bound.layer(n);
                tape.conv2d(stack, w, b, padding)?
            }
        };
        Ok(tape.tanh(score))
    }

    /// Score of one feature-patch pair with valid padding; returns the whole
    /// (usually 1x1) output map.
    pub fn score_patches(&self, left: &Tensor<T>, right: &Tensor<T>) -> Result<Tensor<T>> {
        self.score_map(left, right, Padding::Valid)
    }

    pub fn score_map(&self, left: &Tensor<T>, right: &Tensor<T>, padding: Padding) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let l = tape.constant(left);
        let r = tape.constant(right);
        let s = self.forward(&mut tape, &bound, l, r, padding)?;
        Ok(tape.value(s).clone())
    }
}

impl<T: Scalar> Module<T> for SimilarityNet<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = layer_params("similarity", &self.dense);
        match &self.head {
            SimilarityHead::Deformable { offsets, deform } => {
                out.push(("similarity.offsets.weight".into(), &offsets.weight));
                out.push(("similarity.offsets.bias".into(), &offsets.bias));
                out.push(("similarity.deform.weight".into(), &deform.weight));
                out.push(("similarity.deform.bias".into(), &deform.bias));
            }
            SimilarityHead::Plain(l) => {
                out.push(("similarity.head.weight".into(), &l.weight));
                out.push(("similarity.head.bias".into(), &l.bias));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = layer_params_mut(&mut self.dense);
        match &mut self.head {
            SimilarityHead::Deformable { offsets, deform } => {
                out.extend([&mut offsets.weight, &mut offsets.bias, &mut deform.weight, &mut deform.bias]);
            }
            SimilarityHead::Plain(l) => out.extend([&mut l.weight, &mut l.bias]),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = SimilarityNet::<f32>::new(60, 24, 5, true, &mut rng);
        let ins: Vec<usize> = s.dense.iter().map(|l| l.inputs()).collect();
        assert_eq!(ins, vec![120, 144, 168, 192, 216]);
        match &s.head {
            SimilarityHead::Deformable { offsets, deform } => {
                assert_eq!(offsets.weight.shape(), &[18, 240, 3, 3]);
                assert_eq!(deform.weight.shape(), &[1, 240, 3, 3]);
                assert!(offsets.weight.data().iter().all(|v| *v == 0.0));
            }
            _ => panic!("expected deformable head"),
        }
        assert_eq!(s.receptive_field(), 13);
    }

    #[test]
    fn thirteen_pixel_feature_patch_scores_to_one_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = SimilarityNet::<f64>::new(4, 3, 5, true, &mut rng);
        let a = Tensor::uniform([4, 13, 13], 1.0, &mut rng);
        let b = Tensor::uniform([4, 13, 13], 1.0, &mut rng);
        let out = s.score_patches(&a, &b).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert!(out.data()[0].abs() < 1.0);
    }

    #[test]
    fn rejects_mismatched_feature_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = SimilarityNet::<f64>::new(4, 3, 5, false, &mut rng);
        let a = Tensor::zeros([4, 13, 13]);
        let b = Tensor::zeros([4, 13, 12]);
        assert!(s.score_patches(&a, &b).is_err());
    }
}
