use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array with an optional gradient slot.
///
/// Images are `channels x height x width`, convolution weights are
/// `out x in x k x k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "set_grad",
                format!("gradient has {} values, tensor {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(op, format!("expected CxHxW, got shape {:?}", self.shape))),
        }
    }

    /// `(channels, batch, height, width)`; a rank-3 tensor is a batch of one.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, 1, h, w)),
            [c, n, h, w] => Ok((c, n, h, w)),
            _ => Err(Error::shape(op, format!("expected CxHxW or CxNxHxW, got shape {:?}", self.shape))),
        }
    }

    /// Stacks equally shaped `C x H x W` tensors into a `C x N x H x W` batch.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero tensors".into()))?;
        let (c, h, w) = first.dims3("stack")?;
        if items.iter().any(|t| t.shape != first.shape) {
            return Err(Error::shape("stack", "all items must share one shape"));
        }
        let n = items.len();
        let hw = h * w;
        let mut data = Vec::with_capacity(c * n * hw);
        for ch in 0..c {
            for t in items {
                data.extend_from_slice(&t.data[ch * hw..(ch + 1) * hw]);
            }
        }
        Self::new([c, n, h, w], data)
    }

    /// Item `i` of a `C x N x H x W` batch as a `C x H x W` tensor.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let (c, n, h, w) = self.dims4("batch_item")?;
        if i >= n {
            return Err(Error::InvalidArgument(format!("batch item {} of {}", i, n)));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(c * hw);
        for ch in 0..c {
            data.extend_from_slice(&self.data[(ch * n + i) * hw..(ch * n + i + 1) * hw]);
        }
        Self::new([c, h, w], data)
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-type conversion; drops the gradient.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Spatial window `[top, top+h) x [left, left+w)` of a CxHxW tensor.
    /// Out-of-image positions read as zero.
    pub fn window(&self, top: isize, left: isize, h: usize, w: usize) -> Result<Self> {
        let (c, sh, sw) = self.dims3("window")?;
        let mut out = Self::zeros([c, h, w]);
        for ch in 0..c {
            for y in 0..h {
                let sy = top + y as isize;
                if sy < 0 || sy >= sh as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = left + x as isize;
                    if sx < 0 || sx >= sw as isize {
                        continue;
                    }
                    out.data[(ch * h + y) * w + x] = self.data[(ch * sh + sy as usize) * sw + sx as usize];
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data_length() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new([2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t.rank(), 2);
    }

    #[test]
    fn grad_must_match_shape() {
        let mut t = Tensor::<f64>::zeros([4]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0; 4]);
    }

    #[test]
    fn stack_and_batch_item_invert() {
        let a = Tensor::<f64>::from_fn([2, 2, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn([2, 2, 3], |i| 100.0 + i as f64);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2, 3]);
        assert_eq!(s.data()[6], 100.0);
        assert_eq!(s.batch_item(0).unwrap(), a);
        assert_eq!(s.batch_item(1).unwrap(), b);
    }

    #[test]
    fn window_zero_fills_outside() {
        let t = Tensor::<f64>::from_fn([1, 2, 2], |i| i as f64 + 1.0);
        let w = t.window(-1, -1, 3, 3).unwrap();
        assert_eq!(w.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
    }
}
