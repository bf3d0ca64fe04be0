//! Reverse-mode tape. Every operation appends a node holding its output and
//! the operand handles it needs to replay the chain rule; `backward` walks the
//! nodes in reverse recorded order.

use crate::engine::kernels::{self, ConvGeom, Padding, SampleBounds};
use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom, cols: Vec<T> },
    DeformConv2d { input: Var, offsets: Var, weight: Var, bias: Var, geom: ConvGeom, bounds: SampleBounds, cols: Vec<T> },
    Concat { a: Var, b: Var },
    BatchConcat { a: Var, b: Var },
    Crop { input: Var, top: usize, left: usize },
    Tanh { input: Var },
    Bilinear { input: Var, y: Var, x: Var },
    Softmax { input: Var },
    WeightedCrossEntropy { probs: Var, labels: Vec<usize>, weights: Vec<T> },
    Hinge { positive: Var, negative: Var, margin: T },
    Cosine { a: Var, b: Var },
    Mean { items: Vec<Var> },
    MeanAll { input: Var },
    WeightedSum { input: Var, coeffs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Smallest probability fed to the logarithm of the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// A recorded computation.
///
/// Forward values are evaluated eagerly as operations are recorded;
/// convolutions keep their column matrices for the backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node and the values they hold.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.nodes.shrink_to_fit();
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of a trainable tensor.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        let mut t = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec()).expect("valid tensor");
        t = t.with_requires_grad(true);
        self.leaf(t)
    }

    /// Records a copy of a tensor that never receives gradients.
    pub fn constant(&mut self, tensor: &Tensor<T>) -> Var {
        let t = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec()).expect("valid tensor");
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient stored by the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Stride-1 convolution of a `C x H x W` image or a `C x N x H x W` batch.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: Padding) -> Result<Var> {
        let (c, n, h, w) = self.value(input).dims4("conv2d")?;
        let ws = self.value(weight).shape().to_vec();
        let [o, wc, k, k2] = ws[..] else {
            return Err(Error::shape("conv2d", format!("weights must be OxCxkxk, got {:?}", ws)));
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be square and odd, got {}x{}", k, k2)));
        }
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} do not match weight in-channels {}", c, wc),
            ));
        }
        if self.value(bias).len() != o {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {} does not match out-channels {}", self.value(bias).len(), o),
            ));
        }
        let geom = ConvGeom::new(c, h, w, k, padding)
            .ok_or_else(|| Error::shape("conv2d", format!("{}x{} kernel does not fit a {}x{} input", k, k, h, w)))?
            .batched(n);
        let (out, cols) = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &geom,
        );
        let cols = self.keep_if_tracked(cols, &[input, weight, bias]);
        let t = Tensor::new(self.like(input, o, geom.out_h, geom.out_w), out)?;
        Ok(self.push(t, Op::Conv2d { input, weight, bias, geom, cols }, &[input, weight, bias]))
    }

    /// Deformable convolution. `offsets` holds `2*k*k` channels of `(dy, dx)`
    /// pairs (tap-major, taps row-major) at output resolution.
    pub fn deform_conv2d(
        &mut self,
        input: Var,
        offsets: Var,
        weight: Var,
        bias: Var,
        padding: Padding,
    ) -> Result<Var> {
        self.deform_conv2d_bounded(input, offsets, weight, bias, padding, SampleBounds::Image)
    }

    /// [`Tape::deform_conv2d`] with an explicit sampling region.
    pub fn deform_conv2d_bounded(
        &mut self,
        input: Var,
        offsets: Var,
        weight: Var,
        bias: Var,
        padding: Padding,
        bounds: SampleBounds,
    ) -> Result<Var> {
        let (c, n, h, w) = self.value(input).dims4("deform_conv2d")?;
        let ws = self.value(weight).shape().to_vec();
        let [o, wc, k, k2] = ws[..] else {
            return Err(Error::shape("deform_conv2d", format!("weights must be OxCxkxk, got {:?}", ws)));
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape("deform_conv2d", "kernel must be square and odd"));
        }
        if wc != c {
            return Err(Error::shape(
                "deform_conv2d",
                format!("input channels {} do not match weight in-channels {}", c, wc),
            ));
        }
        if self.value(bias).len() != o {
            return Err(Error::shape("deform_conv2d", "bias length does not match out-channels"));
        }
        let geom = ConvGeom::new(c, h, w, k, padding)
            .ok_or_else(|| Error::shape("deform_conv2d", "kernel does not fit the input"))?
            .batched(n);
        if self.value(offsets).rank() != self.value(input).rank() {
            return Err(Error::shape("deform_conv2d", "offsets and input differ in rank"));
        }
        let (oc, on, oh, ow) = self.value(offsets).dims4("deform_conv2d")?;
        if oc != 2 * k * k {
            return Err(Error::shape(
                "deform_conv2d",
                format!("offset channels must be 2*k*k = {}, got {}", 2 * k * k, oc),
            ));
        }
        if (on, oh, ow) != (n, geom.out_h, geom.out_w) {
            return Err(Error::shape(
                "deform_conv2d",
                format!("offsets are {}x{}x{}, output is {}x{}x{}", on, oh, ow, n, geom.out_h, geom.out_w),
            ));
        }
        let cols = kernels::deform_im2col(self.value(input).data(), self.value(offsets).data(), &geom, bounds);
        let out = kernels::project(
            self.value(weight).data(),
            self.value(bias).data(),
            &cols,
            geom.col_rows(),
            geom.out_pixels(),
        );
        let cols = self.keep_if_tracked(cols, &[input, offsets, weight, bias]);
        let t = Tensor::new(self.like(input, o, geom.out_h, geom.out_w), out)?;
        Ok(self.push(
            t,
            Op::DeformConv2d { input, offsets, weight, bias, geom, bounds, cols },
            &[input, offsets, weight, bias],
        ))
    }

    fn keep_if_tracked(&self, cols: Vec<T>, operands: &[Var]) -> Vec<T> {
        if operands.iter().any(|v| self.requires_grad(*v)) {
            cols
        } else {
            Vec::new()
        }
    }

    /// Shape of an activation with `input`'s rank and batch size.
    fn like(&self, input: Var, c: usize, h: usize, w: usize) -> Vec<usize> {
        let shape = self.value(input).shape();
        if shape.len() == 4 {
            vec![c, shape[1], h, w]
        } else {
            vec![c, h, w]
        }
    }

    /// Channel concatenation: `a` occupies the first channels, `b` the rest.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa.len() < 2 || sa[1..] != sb[1..] {
            return Err(Error::shape(
                "concat_channels",
                format!("shapes {:?} and {:?} differ beyond the channel axis", sa, sb),
            ));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Concat { a, b }, &[a, b]))
    }

    /// Concatenation of two `C x N x H x W` batches along the batch axis.
    pub fn batch_concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, na, ha, wa) = self.value(a).dims4("batch_concat")?;
        let (cb, nb, hb, wb) = self.value(b).dims4("batch_concat")?;
        if (ca, ha, wa) != (cb, hb, wb) {
            return Err(Error::shape("batch_concat", "items differ in channels or size"));
        }
        let plane = ha * wa;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(xa.len() + xb.len());
        for c in 0..ca {
            data.extend_from_slice(&xa[c * na * plane..(c + 1) * na * plane]);
            data.extend_from_slice(&xb[c * nb * plane..(c + 1) * nb * plane]);
        }
        let t = Tensor::new([ca, na + nb, ha, wa], data)?;
        Ok(self.push(t, Op::BatchConcat { a, b }, &[a, b]))
    }

    /// Spatial sub-window `[top, top+h) x [left, left+w)` of every plane.
    pub fn crop(&mut self, input: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let (c, n, ih, iw) = self.value(input).dims4("crop")?;
        if top + h > ih || left + w > iw {
            return Err(Error::shape(
                "crop",
                format!("window {}x{} at ({}, {}) exceeds {}x{}", h, w, top, left, ih, iw),
            ));
        }
        let x = self.value(input).data();
        let mut data = Vec::with_capacity(c * n * h * w);
        for plane in 0..c * n {
            for y in 0..h {
                let s = (plane * ih + y + top) * iw + left;
                data.extend_from_slice(&x[s..s + w]);
            }
        }
        let t = Tensor::new(self.like(input, c, h, w), data)?;
        Ok(self.push(t, Op::Crop { input, top, left }, &[input]))
    }

    /// Centre crop to `h x w`; both margins must be even.
    pub fn center_crop(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let (_, _, ih, iw) = self.value(input).dims4("crop")?;
        if ih < h || iw < w || !(ih - h).is_multiple_of(2) || !(iw - w).is_multiple_of(2) {
            return Err(Error::shape(
                "crop",
                format!("cannot centre-crop {}x{} to {}x{}", ih, iw, h, w),
            ));
        }
        if (ih, iw) == (h, w) {
            return Ok(input);
        }
        self.crop(input, (ih - h) / 2, (iw - w) / 2, h, w)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.act_tanh()).collect())
            .expect("same shape");
        self.push(t, Op::Tanh { input }, &[input])
    }

    /// Bilinear sample of every channel at the scalar position `(y, x)`.
    pub fn bilinear(&mut self, input: Var, y: Var, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3("bilinear_sample")?;
        if self.value(y).len() != 1 || self.value(x).len() != 1 {
            return Err(Error::shape("bilinear_sample", "sample coordinates must be scalars"));
        }
        let (yv, xv) = (self.value(y).data()[0], self.value(x).data()[0]);
        let out = kernels::bilinear_sample(self.value(input).data(), c, h, w, yv, xv);
        let t = Tensor::new([c], out)?;
        Ok(self.push(t, Op::Bilinear { input, y, x }, &[input, y, x]))
    }

    /// Softmax along the first axis, independently for every remaining
    /// index (a vector is one distribution). Stabilised by max subtraction.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.is_empty() {
            return Err(Error::InvalidArgument("softmax of an empty vector".into()));
        }
        let (classes, cols) = columns(x.shape());
        let mut out = vec![T::zero(); x.len()];
        let mut buf = vec![T::zero(); classes];
        for j in 0..cols {
            for (c, b) in buf.iter_mut().enumerate() {
                *b = x.data()[c * cols + j];
            }
            for (c, p) in softmax_slice(&buf).into_iter().enumerate() {
                out[c * cols + j] = p;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { input }, &[input]))
    }

    /// `-weight * ln(max(p[label], 1e-12))` for one distribution.
    pub fn weighted_cross_entropy(&mut self, probs: Var, label: usize, weight: T) -> Result<Var> {
        self.weighted_cross_entropy_batch(probs, vec![label], vec![weight])
    }

    /// Mean over columns `j` of `-weights[j] * ln(max(p[labels[j], j], 1e-12))`
    /// where classes run along the first axis.
    pub fn weighted_cross_entropy_batch(&mut self, probs: Var, labels: Vec<usize>, weights: Vec<T>) -> Result<Var> {
        let p = self.value(probs);
        let (classes, cols) = columns(p.shape());
        if labels.len() != cols || weights.len() != cols {
            return Err(Error::shape(
                "weighted_cross_entropy",
                format!("{} columns but {} labels and {} weights", cols, labels.len(), weights.len()),
            ));
        }
        if let Some(l) = labels.iter().find(|l| **l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {} classes",
                l, classes
            )));
        }
        let floor = T::lit(PROB_FLOOR);
        let total: T = labels
            .iter()
            .zip(&weights)
            .enumerate()
            .map(|(j, (l, w))| -*w * p.data()[l * cols + j].max(floor).ln())
            .sum();
        let t = Tensor::scalar(total / T::lit(cols as f64));
        Ok(self.push(t, Op::WeightedCrossEntropy { probs, labels, weights }, &[probs]))
    }

    /// Elementwise `max(0, margin + negative - positive)`.
    pub fn hinge(&mut self, positive: Var, negative: Var, margin: T) -> Result<Var> {
        if self.value(positive).len() != self.value(negative).len() {
            return Err(Error::shape("hinge_loss", "positive and negative scores differ in count"));
        }
        let v = self
            .value(positive)
            .data()
            .iter()
            .zip(self.value(negative).data())
            .map(|(p, n)| hinge_value(*p, *n, margin))
            .collect();
        let t = Tensor::new(self.value(positive).shape().to_vec(), v)?;
        Ok(self.push(t, Op::Hinge { positive, negative, margin }, &[positive, negative]))
    }

    /// Cosine similarity along the first axis, one value per remaining index;
    /// 0 where either vector has zero norm.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("cosine", "operands differ in shape"));
        }
        let shape = self.value(a).shape();
        let (_, cols) = columns(shape);
        let out_shape = if shape.len() > 1 { shape[1..].to_vec() } else { vec![1] };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let v = (0..cols)
            .map(|j| cosine_slice(&column(av, cols, j), &column(bv, cols, j)))
            .collect();
        let t = Tensor::new(out_shape, v)?;
        Ok(self.push(t, Op::Cosine { a, b }, &[a, b]))
    }

    /// Mean of all elements.
    pub fn mean_all(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.is_empty() {
            return Err(Error::InvalidArgument("mean of zero items".into()));
        }
        let m = x.data().iter().copied().sum::<T>() / T::lit(x.len() as f64);
        Ok(self.push(Tensor::scalar(m), Op::MeanAll { input }, &[input]))
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("mean of zero items".into()));
        }
        if items.iter().any(|v| self.value(*v).len() != 1) {
            return Err(Error::shape("mean", "all items must be scalars"));
        }
        let n = T::lit(items.len() as f64);
        let s: T = items.iter().map(|v| self.value(*v).data()[0]).sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mean { items: items.to_vec() }, items))
    }

    /// `sum_i coeffs[i] * input[i]`.
    pub fn weighted_sum(&mut self, input: Var, coeffs: Vec<T>) -> Result<Var> {
        if self.value(input).len() != coeffs.len() {
            return Err(Error::shape("weighted_sum", "coefficient count differs from input size"));
        }
        let s: T = self.value(input).data().iter().zip(&coeffs).map(|(a, b)| *a * *b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { input, coeffs }, &[input]))
    }

    /// Runs reverse accumulation from a scalar `loss`. Gradients of every
    /// gradient-tracking node are left in the node's tensor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        for n in self.nodes.iter_mut() {
            n.value.zero_grad();
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        // column-gradient buffer shared by every convolution node
        let mut scratch = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads, &mut scratch);
            self.nodes[i].value.set_grad(g)?;
        }
        // unreached trainable leaves get an explicit zero gradient
        for n in self.nodes[..=loss.0].iter_mut() {
            if n.requires_grad && matches!(n.op, Op::Leaf) && n.value.grad().is_none() {
                let zeros = vec![T::zero(); n.value.len()];
                n.value.set_grad(zeros)?;
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>], scratch: &mut Vec<T>) {
        fn sized<T: Scalar>(buf: &mut Vec<T>, n: usize) -> &mut [T] {
            if buf.len() < n {
                buf.resize(n, T::zero());
            }
            &mut buf[..n]
        }
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, $v, self.nodes[$v.0].value.len())
            };
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom, cols } => {
                let (input, weight, bias, geom) = (*input, *weight, *bias, *geom);
                let mut dw = self.needs(weight).then(|| vec![T::zero(); self.value(weight).len()]);
                let mut db = self.needs(bias).then(|| vec![T::zero(); self.value(bias).len()]);
                let n = geom.col_rows() * geom.out_pixels();
                let out_ch = self.value(bias).len();
                let full = kernels::prefers_full_correlation(&geom, out_ch);
                let via_cols = self.needs(input) && !full;
                let dcols = via_cols.then(|| sized(scratch, n));
                kernels::project_backward(
                    self.value(weight).data(),
                    cols,
                    g,
                    geom.col_rows(),
                    geom.out_pixels(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    dcols,
                );
                if let Some(dw) = dw {
                    add_into(acc!(weight), &dw);
                }
                if let Some(db) = db {
                    add_into(acc!(bias), &db);
                }
                if via_cols {
                    kernels::col2im(&scratch[..n], &geom, acc!(input));
                } else if self.needs(input) {
                    kernels::conv2d_input_grad_full(self.value(weight).data(), g, &geom, acc!(input));
                }
            }
            Op::DeformConv2d { input, offsets, weight, bias, geom, bounds, cols } => {
                let (input, offsets, weight, bias, geom) = (*input, *offsets, *weight, *bias, *geom);
                let x = self.value(input).data();
                let off = self.value(offsets).data();
                let mut dw = self.needs(weight).then(|| vec![T::zero(); self.value(weight).len()]);
                let mut db = self.needs(bias).then(|| vec![T::zero(); self.value(bias).len()]);
                let want = self.needs(input) || self.needs(offsets);
                let n = geom.col_rows() * geom.out_pixels();
                kernels::project_backward(
                    self.value(weight).data(),
                    cols,
                    g,
                    geom.col_rows(),
                    geom.out_pixels(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    want.then(|| sized(scratch, n)),
                );
                if let Some(dw) = dw {
                    add_into(acc!(weight), &dw);
                }
                if let Some(db) = db {
                    add_into(acc!(bias), &db);
                }
                if want {
                    let dcols = &scratch[..n];
                    let mut di = self.needs(input).then(|| vec![T::zero(); x.len()]);
                    let mut doff = self.needs(offsets).then(|| vec![T::zero(); off.len()]);
                    kernels::deform_col2im(x, off, dcols, &geom, *bounds, di.as_deref_mut(), doff.as_deref_mut());
                    if let Some(di) = di {
                        add_into(acc!(input), &di);
                    }
                    if let Some(doff) = doff {
                        add_into(acc!(offsets), &doff);
                    }
                }
            }
            Op::Concat { a, b } => {
                let na = self.value(*a).len();
                if self.needs(*a) {
                    add_into(acc!(*a), &g[..na]);
                }
                if self.needs(*b) {
                    add_into(acc!(*b), &g[na..]);
                }
            }
            Op::BatchConcat { a, b } => {
                let (c, na, h, w) = self.value(*a).dims4("batch_concat").expect("batch");
                let nb = self.value(*b).dims4("batch_concat").expect("batch").1;
                let (sa, sb) = (na * h * w, nb * h * w);
                if self.needs(*a) {
                    let dst = acc!(*a);
                    for ch in 0..c {
                        add_into(&mut dst[ch * sa..(ch + 1) * sa], &g[ch * (sa + sb)..ch * (sa + sb) + sa]);
                    }
                }
                if self.needs(*b) {
                    let dst = acc!(*b);
                    for ch in 0..c {
                        add_into(&mut dst[ch * sb..(ch + 1) * sb], &g[ch * (sa + sb) + sa..(ch + 1) * (sa + sb)]);
                    }
                }
            }
            Op::Crop { input, top, left } => {
                if self.needs(*input) {
                    let (c, n, ih, iw) = self.value(*input).dims4("crop").expect("image");
                    let out = self.nodes[i].value.shape();
                    let (h, w) = (out[out.len() - 2], out[out.len() - 1]);
                    let dst = acc!(*input);
                    for plane in 0..c * n {
                        for y in 0..h {
                            let s = (plane * h + y) * w;
                            let d = (plane * ih + y + top) * iw + left;
                            add_into(&mut dst[d..d + w], &g[s..s + w]);
                        }
                    }
                }
            }
            Op::Tanh { input } => {
                if self.needs(*input) {
                    let y = self.nodes[i].value.data();
                    let dst = acc!(*input);
                    for ((d, gy), yv) in dst.iter_mut().zip(g).zip(y) {
                        *d += *gy * (T::one() - *yv * *yv);
                    }
                }
            }
            Op::Bilinear { input, y, x } => {
                let (input, y, x) = (*input, *y, *x);
                let (c, h, w) = self.value(input).dims3("bilinear_sample").expect("rank 3");
                let yv = self.value(y).data()[0];
                let xv = self.value(x).data()[0];
                let di = self.needs(input).then(|| acc!(input));
                let (gy, gx) = kernels::bilinear_sample_backward(
                    self.value(input).data(),
                    c,
                    h,
                    w,
                    yv,
                    xv,
                    g,
                    di.map(|v: &mut Vec<T>| v.as_mut_slice()),
                );
                if self.needs(y) {
                    acc!(y)[0] += gy;
                }
                if self.needs(x) {
                    acc!(x)[0] += gx;
                }
            }
            Op::Softmax { input } => {
                if self.needs(*input) {
                    let p = self.nodes[i].value.data();
                    let (classes, cols) = columns(self.nodes[i].value.shape());
                    let dst = acc!(*input);
                    for j in 0..cols {
                        let dot: T = (0..classes).map(|c| p[c * cols + j] * g[c * cols + j]).sum();
                        for c in 0..classes {
                            let k = c * cols + j;
                            dst[k] += p[k] * (g[k] - dot);
                        }
                    }
                }
            }
            Op::WeightedCrossEntropy { probs, labels, weights } => {
                if self.needs(*probs) {
                    let (_, cols) = columns(self.value(*probs).shape());
                    let scale = g[0] / T::lit(cols as f64);
                    let p = self.value(*probs).data();
                    let floor = T::lit(PROB_FLOOR);
                    let mut upd = Vec::with_capacity(cols);
                    for (j, (l, w)) in labels.iter().zip(weights).enumerate() {
                        let k = l * cols + j;
                        if p[k] > floor {
                            upd.push((k, -scale * *w / p[k]));
                        }
                    }
                    let dst = acc!(*probs);
                    for (k, v) in upd {
                        dst[k] += v;
                    }
                }
            }
            Op::Hinge { positive, negative, margin } => {
                let pos = self.value(*positive).data();
                let neg = self.value(*negative).data();
                let active: Vec<bool> = pos.iter().zip(neg).map(|(p, n)| *margin + *n - *p > T::zero()).collect();
                if self.needs(*positive) {
                    let dst = acc!(*positive);
                    for ((d, a), gv) in dst.iter_mut().zip(&active).zip(g) {
                        if *a {
                            *d -= *gv;
                        }
                    }
                }
                if self.needs(*negative) {
                    let dst = acc!(*negative);
                    for ((d, a), gv) in dst.iter_mut().zip(&active).zip(g) {
                        if *a {
                            *d += *gv;
                        }
                    }
                }
            }
            Op::Cosine { a, b } => {
                let (a, b) = (*a, *b);
                let (channels, cols) = columns(self.value(a).shape());
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let s = self.nodes[i].value.data();
                let mut da = self.needs(a).then(|| vec![T::zero(); av.len()]);
                let mut db = self.needs(b).then(|| vec![T::zero(); bv.len()]);
                for j in 0..cols {
                    let x = column(av, cols, j);
                    let y = column(bv, cols, j);
                    let na = x.iter().map(|v| *v * *v).sum::<T>().sqrt();
                    let nb = y.iter().map(|v| *v * *v).sum::<T>().sqrt();
                    if na == T::zero() || nb == T::zero() {
                        continue;
                    }
                    let inv = T::one() / (na * nb);
                    for (d, u, v, n) in [(&mut da, &x, &y, na), (&mut db, &y, &x, nb)] {
                        if let Some(d) = d.as_deref_mut() {
                            let coef = s[j] / (n * n);
                            for c in 0..channels {
                                d[c * cols + j] += g[j] * (v[c] * inv - coef * u[c]);
                            }
                        }
                    }
                }
                if let Some(da) = da {
                    add_into(acc!(a), &da);
                }
                if let Some(db) = db {
                    add_into(acc!(b), &db);
                }
            }
            Op::MeanAll { input } => {
                if self.needs(*input) {
                    let n = self.value(*input).len();
                    let share = g[0] / T::lit(n as f64);
                    acc!(*input).iter_mut().for_each(|d| *d += share);
                }
            }
            Op::Mean { items } => {
                let share = g[0] / T::lit(items.len() as f64);
                for v in items {
                    if self.needs(*v) {
                        acc!(*v)[0] += share;
                    }
                }
            }
            Op::WeightedSum { input, coeffs } => {
                if self.needs(*input) {
                    let dst = acc!(*input);
                    for (d, c) in dst.iter_mut().zip(coeffs) {
                        *d += g[0] * *c;
                    }
                }
            }
        }
    }
}

/// `(length of the first axis, product of the remaining axes)`.
fn columns(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, 1),
        [c, rest @ ..] => (*c, rest.iter().product()),
    }
}

fn column<T: Scalar>(data: &[T], cols: usize, j: usize) -> Vec<T> {
    data.iter().skip(j).step_by(cols).copied().collect()
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

pub fn softmax_slice<T: Scalar>(x: &[T]) -> Vec<T> {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|v| (*v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn hinge_value<T: Scalar>(positive: T, negative: T, margin: T) -> T {
    (margin + negative - positive).max(T::zero())
}

pub fn cosine_slice<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(x, y)| *x * *y).sum();
    let na = a.iter().map(|v| *v * *v).sum::<T>().sqrt();
    let nb = b.iter().map(|v| *v * *v).sum::<T>().sqrt();
    if na > T::zero() && nb > T::zero() {
        dot / (na * nb)
    } else {
        T::zero()
    }
}
