use rand::Rng;

use crate::engine::{Padding, Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// One `k x k` convolution: weights `out x in x k x k`, bias `out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvLayer<T> {
    /// Uniform fan-in scaled weights, zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, k: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (inputs * k * k) as f64).sqrt();
        ConvLayer {
            weight: Tensor::uniform([outputs, inputs, k, k], bound, rng),
            bias: Tensor::zeros([outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize, k: usize) -> Self {
        ConvLayer {
            weight: Tensor::zeros([outputs, inputs, k, k]),
            bias: Tensor::zeros([outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Tape handles of a parameter list, in the owning module's canonical order.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn layer(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }
}

/// Anything owning an ordered list of named trainable tensors.
pub trait Module<T: Scalar> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records the parameters on `tape`. With `trainable` false they are
    /// constants and never receive gradients.
    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .named_params()
            .into_iter()
            .map(|(_, t)| if trainable { tape.param(t) } else { tape.constant(t) })
            .collect();
        Bound { vars }
    }

    /// Moves the gradients computed by the last `backward` into the
    /// parameters' gradient slots.
    fn pull_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for (p, v) in self.params_mut().into_iter().zip(&bound.vars) {
            match tape.grad(*v) {
                Some(g) => p.set_grad(g.to_vec())?,
                None => p.zero_grad(),
            }
        }
        Ok(())
    }
}

pub(crate) fn layer_params<'a, T: Scalar>(prefix: &str, layers: &'a [ConvLayer<T>]) -> Vec<(String, &'a Tensor<T>)> {
    layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                (format!("{}.{}.weight", prefix, i), &l.weight),
                (format!("{}.{}.bias", prefix, i), &l.bias),
            ]
        })
        .collect()
}

pub(crate) fn layer_params_mut<T: Scalar>(layers: &mut [ConvLayer<T>]) -> Vec<&mut Tensor<T>> {
    layers
        .iter_mut()
        .flat_map(|l| [&mut l.weight, &mut l.bias])
        .collect()
}

/// Densely connected stack: layer `i` sees the channel concatenation of the
/// block input and every earlier layer's output. With valid padding the
/// earlier maps are centre-cropped to the current size first.
///
/// Returns `(last layer output, concatenation of input and all outputs)`.
pub(crate) fn dense_forward<T: Scalar>(
    tape: &mut Tape<T>,
    layers: &[(Var, Var)],
    input: Var,
    padding: Padding,
) -> Result<(Var, Var)> {
    let mut stack = input;
    let mut last = input;
    for &(w, b) in layers {
        let z = tape.conv2d(stack, w, b, padding)?;
        let y = tape.tanh(z);
        let (_, _, h, wd) = tape.value(y).dims4("dense")?;
        let trimmed = tape.center_crop(stack, h, wd)?;
        stack = tape.concat(trimmed, y)?;
        last = y;
    }
    Ok((last, stack))
}
