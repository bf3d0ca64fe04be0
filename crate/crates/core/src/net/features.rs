use rand::Rng;

use crate::engine::{Padding, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::net::layers::{dense_forward, layer_params, layer_params_mut, Bound, ConvLayer, Module};
use crate::scalar::Scalar;

/// Input channels expected by the feature extractor (RGB).
pub const IMAGE_CHANNELS: usize = 3;

/// Siamese feature extractor: four densely connected 3x3 convolutions with
/// tanh, the last of which emits the per-pixel feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T> {
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Scalar> FeatureExtractor<T> {
    /// `widths[i]` is the output channel count of layer `i`; the last entry
    /// is the feature dimension.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        let mut inputs = IMAGE_CHANNELS;
        let layers = widths
            .iter()
            .map(|&w| {
                let l = ConvLayer::he_uniform(inputs, w, 3, rng);
                inputs += w;
                l
            })
            .collect();
        FeatureExtractor { layers }
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs())
    }

    /// Side length of the input window that determines one output pixel.
    pub fn receptive_field(&self) -> usize {
        1 + self.layers.iter().map(|l| l.kernel() - 1).sum::<usize>()
    }

    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, image: Var, padding: Padding) -> Result<Var> {
        let (c, _, _, _) = tape.value(image).dims4("extract_features")?;
        if c != IMAGE_CHANNELS {
            return Err(Error::shape(
                "extract_features",
                format!("expected {} input channels, got {}", IMAGE_CHANNELS, c),
            ));
        }
        let layers: Vec<(Var, Var)> = (0..self.layers.len()).map(|i| bound.layer(i)).collect();
        let (out, _) = dense_forward(tape, &layers, image, padding)?;
        Ok(out)
    }

    /// Inference on a whole image with zero-pad-same convolutions.
    pub fn extract(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(image);
        let y = self.forward(&mut tape, &bound, x, Padding::Same)?;
        Ok(tape.value(y).clone())
    }
}

impl<T: Scalar> Module<T> for FeatureExtractor<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        layer_params("features", &self.layers)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        layer_params_mut(&mut self.layers)
    }
}

/// Per-image, per-channel standardisation with a 1e-6 floor on the deviation.
pub fn normalize_image<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = image.dims3("normalize_image")?;
    let n = (h * w) as f64;
    let mut out = image.clone();
    for ch in 0..c {
        let plane = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        let mean = plane.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
        let var = plane.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-6);
        for v in plane.iter_mut() {
            *v = T::lit((v.to_f64_lossy() - mean) / sd);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_has_feature_dim_channels_and_input_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fe = FeatureExtractor::<f32>::new(&[8, 8, 8, 12], &mut rng);
        let img = Tensor::uniform([3, 9, 11], 1.0, &mut rng);
        let f = fe.extract(&img).unwrap();
        assert_eq!(f.shape(), &[12, 9, 11]);
        assert_eq!(fe.receptive_field(), 9);
    }

    #[test]
    fn rejects_non_rgb_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fe = FeatureExtractor::<f32>::new(&[4, 4, 4, 4], &mut rng);
        assert!(fe.extract(&Tensor::zeros([1, 8, 8])).is_err());
    }

    #[test]
    fn default_layer_inputs_follow_dense_growth() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fe = FeatureExtractor::<f32>::new(&[60; 4], &mut rng);
        let ins: Vec<usize> = fe.layers.iter().map(|l| l.inputs()).collect();
        assert_eq!(ins, vec![3, 63, 123, 183]);
        assert_eq!(fe.param_count(), 1680 + 34080 + 66480 + 98880);
    }

    #[test]
    fn normalization_is_zero_mean_unit_variance() {
        let img = Tensor::<f64>::from_fn([3, 4, 5], |i| (i * i % 17) as f64);
        let n = normalize_image(&img).unwrap();
        for ch in 0..3 {
            let p = &n.data()[ch * 20..(ch + 1) * 20];
            let m: f64 = p.iter().sum::<f64>() / 20.0;
            let v: f64 = p.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 20.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
        let flat = normalize_image(&Tensor::<f64>::full([3, 2, 2], 5.0)).unwrap();
        assert!(flat.data().iter().all(|v| *v == 0.0));
    }
}
