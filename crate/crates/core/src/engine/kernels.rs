//! Raw forward/backward kernels over flat slices. The tape in `tape.rs`
//! wires these into the autodiff graph.

use crate::scalar::Scalar;

/// Spatial padding policy of a stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on every side; output keeps `H x W`.
    Same,
    /// No padding; output is `(H - k + 1) x (W - k + 1)`.
    Valid,
}

impl Padding {
    pub fn amount(self, k: usize) -> usize {
        match self {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        }
    }

    /// Output extent for an input extent `n`, or `None` if the kernel does not fit.
    pub fn output_len(self, n: usize, k: usize) -> Option<usize> {
        (n + 2 * self.amount(k) + 1).checked_sub(k).filter(|&v| v > 0)
    }
}

/// Geometry of one stride-1 2-D convolution over `batch` images stored
/// channel-major (`C x N x H x W`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, k: usize, padding: Padding) -> Option<Self> {
        Some(ConvGeom {
            channels,
            batch: 1,
            height,
            width,
            k,
            pad: padding.amount(k),
            out_h: padding.output_len(height, k)?,
            out_w: padding.output_len(width, k)?,
        })
    }

    pub fn batched(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    pub fn taps(&self) -> usize {
        self.k * self.k
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.taps()
    }

    /// Output pixels of one image.
    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output pixels over the whole batch (columns of the unfolded matrix).
    pub fn out_pixels(&self) -> usize {
        self.batch * self.out_plane()
    }

    fn in_plane(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds the input into a `(C*k*k) x (N*out_h*out_w)` column matrix.
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.out_pixels();
    let hw = g.in_plane();
    if g.pad == 0 {
        // every entry is written, in storage order
        let mut cols = Vec::with_capacity(g.col_rows() * p);
        for c in 0..g.channels {
            for ki in 0..g.k {
                for kj in 0..g.k {
                    for n in 0..g.batch {
                        let plane = &input[(c * g.batch + n) * hw..(c * g.batch + n + 1) * hw];
                        for oy in 0..g.out_h {
                            let s0 = (oy + ki) * g.width + kj;
                            cols.extend_from_slice(&plane[s0..s0 + g.out_w]);
                        }
                    }
                }
            }
        }
        return cols;
    }
    let op = g.out_plane();
    let mut cols = vec![T::zero(); g.col_rows() * p];
    for c in 0..g.channels {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let shift = kj as isize - g.pad as isize;
                let x_lo = (-shift).max(0) as usize;
                let x_hi = ((g.width as isize - shift).min(g.out_w as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for n in 0..g.batch {
                    let plane = &input[(c * g.batch + n) * hw..(c * g.batch + n + 1) * hw];
                    let dst = &mut cols[row * p + n * op..row * p + (n + 1) * op];
                    for oy in 0..g.out_h {
                        let iy = oy as isize + ki as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                        let d = &mut dst[oy * g.out_w + x_lo..oy * g.out_w + x_hi];
                        let s0 = (x_lo as isize + shift) as usize;
                        d.copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dinput: &mut [T]) {
    let p = g.out_pixels();
    let op = g.out_plane();
    let hw = g.in_plane();
    if g.pad == 0 {
        let mut src = cols.chunks_exact(g.out_w);
        for c in 0..g.channels {
            for ki in 0..g.k {
                for kj in 0..g.k {
                    for n in 0..g.batch {
                        let plane = &mut dinput[(c * g.batch + n) * hw..(c * g.batch + n + 1) * hw];
                        for oy in 0..g.out_h {
                            let s0 = (oy + ki) * g.width + kj;
                            let s = src.next().expect("cols cover the geometry");
                            for (dv, sv) in plane[s0..s0 + g.out_w].iter_mut().zip(s) {
                                *dv += *sv;
                            }
                        }
                    }
                }
            }
        }
        return;
    }
    for c in 0..g.channels {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let shift = kj as isize - g.pad as isize;
                let x_lo = (-shift).max(0) as usize;
                let x_hi = ((g.width as isize - shift).min(g.out_w as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for n in 0..g.batch {
                    let plane = &mut dinput[(c * g.batch + n) * hw..(c * g.batch + n + 1) * hw];
                    let src = &cols[row * p + n * op..row * p + (n + 1) * op];
                    for oy in 0..g.out_h {
                        let iy = oy as isize + ki as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let d = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                        let s0 = (x_lo as isize + shift) as usize;
                        let d = &mut d[s0..s0 + (x_hi - x_lo)];
                        for (dv, sv) in d.iter_mut().zip(&src[oy * g.out_w + x_lo..oy * g.out_w + x_hi]) {
                            *dv += *sv;
                        }
                    }
                }
            }
        }
    }
}

/// `out[o, p] = sum_r weight[o, r] * cols[r, p] + bias[o]`.
pub fn project<T: Scalar>(weight: &[T], bias: &[T], cols: &[T], rows: usize, pixels: usize) -> Vec<T> {
    let out_ch = bias.len();
    let mut out = Vec::with_capacity(out_ch * pixels);
    for b in bias {
        out.resize(out.len() + pixels, *b);
    }
    T::gemm(out_ch, rows, pixels, T::one(), weight, false, cols, false, T::one(), &mut out);
    out
}

/// Gradients of [`project`]: accumulates into `dweight`/`dbias` and
/// overwrites `dcols` (`rows * pixels` long; prior contents are ignored).
#[allow(clippy::too_many_arguments)]
pub fn project_backward<T: Scalar>(
    weight: &[T],
    cols: &[T],
    dout: &[T],
    rows: usize,
    pixels: usize,
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
    dcols: Option<&mut [T]>,
) {
    let out_ch = dout.len() / pixels.max(1);
    if let Some(dw) = dweight {
        T::gemm(out_ch, pixels, rows, T::one(), dout, false, cols, true, T::one(), dw);
    }
    if let Some(db) = dbias {
        for (o, b) in db.iter_mut().enumerate() {
            *b += dout[o * pixels..(o + 1) * pixels].iter().copied().sum::<T>();
        }
    }
    if let Some(dc) = dcols {
        T::gemm(rows, out_ch, pixels, T::one(), weight, true, dout, false, T::zero(), &mut dc[..rows * pixels]);
    }
}

/// Whether [`conv2d_input_grad_full`] touches fewer column entries than the
/// `dcols` + [`col2im`] route for this valid convolution.
pub fn prefers_full_correlation(g: &ConvGeom, out_ch: usize) -> bool {
    g.pad == 0 && out_ch * g.in_plane() <= g.channels * g.out_plane()
}

/// Input gradient of a valid convolution as a full correlation of `dout`
/// with the spatially flipped, channel-transposed kernel; accumulates into
/// `dinput`.
pub fn conv2d_input_grad_full<T: Scalar>(weight: &[T], dout: &[T], g: &ConvGeom, dinput: &mut [T]) {
    debug_assert_eq!(g.pad, 0);
    let (c, k) = (g.channels, g.k);
    let taps = g.taps();
    let out_ch = weight.len() / (c * taps);
    let full = ConvGeom {
        channels: out_ch,
        batch: g.batch,
        height: g.out_h,
        width: g.out_w,
        k,
        pad: k - 1,
        out_h: g.height,
        out_w: g.width,
    };
    let cols = im2col(dout, &full);
    // flipped[ci, (o, a, b)] = weight[o, ci, k-1-a, k-1-b]
    let mut flipped = vec![T::zero(); c * out_ch * taps];
    for o in 0..out_ch {
        for ci in 0..c {
            let src = &weight[(o * c + ci) * taps..(o * c + ci + 1) * taps];
            let dst = &mut flipped[(ci * out_ch + o) * taps..(ci * out_ch + o + 1) * taps];
            for (t, d) in dst.iter_mut().enumerate() {
                *d = src[taps - 1 - t];
            }
        }
    }
    let pixels = g.batch * g.in_plane();
    T::gemm(c, out_ch * taps, pixels, T::one(), &flipped, false, &cols, false, T::one(), dinput);
}

/// Returns `(output, column matrix)`.
pub fn conv2d_forward<T: Scalar>(input: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let cols = im2col(input, g);
    let out = project(weight, bias, &cols, g.col_rows(), g.out_pixels());
    (out, cols)
}

/// Inclusive row/column range a bilinear sample may read; anything outside
/// contributes zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub width: usize,
    y_lo: isize,
    y_hi: isize,
    x_lo: isize,
    x_hi: isize,
}

impl Region {
    pub fn image(h: usize, w: usize) -> Self {
        Region {
            width: w,
            y_lo: 0,
            y_hi: h as isize - 1,
            x_lo: 0,
            x_hi: w as isize - 1,
        }
    }

    /// `[y0, y0 + k) x [x0, x0 + k)` intersected with the image.
    fn window(h: usize, w: usize, y0: isize, x0: isize, k: usize) -> Self {
        let k = k as isize;
        Region {
            width: w,
            y_lo: y0.max(0),
            y_hi: (y0 + k - 1).min(h as isize - 1),
            x_lo: x0.max(0),
            x_hi: (x0 + k - 1).min(w as isize - 1),
        }
    }

    #[inline]
    fn index(&self, y: isize, x: isize) -> Option<usize> {
        (y >= self.y_lo && y <= self.y_hi && x >= self.x_lo && x <= self.x_hi)
            .then(|| y as usize * self.width + x as usize)
    }

    #[inline]
    fn misses(&self, y0: isize, x0: isize) -> bool {
        y0 < self.y_lo - 1 || x0 < self.x_lo - 1 || y0 > self.y_hi || x0 > self.x_hi
    }
}

/// Where the taps of a deformable convolution may sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SampleBounds {
    /// Anywhere in the image.
    #[default]
    Image,
    /// Only inside the `k x k` window the regular kernel covers at that
    /// output pixel. On a valid-padded `k x k` input this equals `Image`.
    Window,
}

/// Bilinear interpolation stencil around a fractional position.
#[derive(Clone, Copy, Debug)]
pub struct Stencil<T> {
    y0: isize,
    x0: isize,
    fy: T,
    fx: T,
}

impl<T: Scalar> Stencil<T> {
    pub fn at(y: T, x: T) -> Self {
        let yf = y.floor();
        let xf = x.floor();
        Stencil {
            y0: yf.to_isize().unwrap_or(isize::MIN / 2),
            x0: xf.to_isize().unwrap_or(isize::MIN / 2),
            fy: y - yf,
            fx: x - xf,
        }
    }

    /// The four neighbours as `(index, weight)`; neighbours outside `r`
    /// are `None` (they contribute zero).
    #[inline]
    fn corners(&self, r: &Region) -> [(Option<usize>, T); 4] {
        let one = T::one();
        [
            (r.index(self.y0, self.x0), (one - self.fy) * (one - self.fx)),
            (r.index(self.y0, self.x0 + 1), (one - self.fy) * self.fx),
            (r.index(self.y0 + 1, self.x0), self.fy * (one - self.fx)),
            (r.index(self.y0 + 1, self.x0 + 1), self.fy * self.fx),
        ]
    }

    #[inline]
    fn value(&self, plane: &[T], r: &Region) -> T {
        if r.misses(self.y0, self.x0) {
            return T::zero();
        }
        self.corners(r)
            .iter()
            .filter_map(|(i, wt)| i.map(|i| plane[i] * *wt))
            .sum()
    }

    /// `(d value / dy, d value / dx)`.
    #[inline]
    fn slopes(&self, plane: &[T], r: &Region) -> (T, T) {
        if r.misses(self.y0, self.x0) {
            return (T::zero(), T::zero());
        }
        let c = self.corners(r);
        let v = |k: usize| c[k].0.map(|i| plane[i]).unwrap_or_else(T::zero);
        let (v00, v01, v10, v11) = (v(0), v(1), v(2), v(3));
        let one = T::one();
        let dy = (one - self.fx) * (v10 - v00) + self.fx * (v11 - v01);
        let dx = (one - self.fy) * (v01 - v00) + self.fy * (v11 - v10);
        (dy, dx)
    }

    #[inline]
    fn scatter(&self, g: T, plane: &mut [T], r: &Region) {
        if r.misses(self.y0, self.x0) {
            return;
        }
        for (i, wt) in self.corners(r) {
            if let Some(i) = i {
                plane[i] += g * wt;
            }
        }
    }
}

/// Samples every channel of a `C x H x W` input at `(y, x)`.
pub fn bilinear_sample<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, y: T, x: T) -> Vec<T> {
    let s = Stencil::at(y, x);
    let r = Region::image(h, w);
    (0..c).map(|ch| s.value(&input[ch * h * w..(ch + 1) * h * w], &r)).collect()
}

/// Backward of [`bilinear_sample`]: returns `(d/dy, d/dx)` and accumulates into `dinput`.
pub fn bilinear_sample_backward<T: Scalar>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    y: T,
    x: T,
    dout: &[T],
    dinput: Option<&mut [T]>,
) -> (T, T) {
    let s = Stencil::at(y, x);
    let r = Region::image(h, w);
    let (mut gy, mut gx) = (T::zero(), T::zero());
    for ch in 0..c {
        let (sy, sx) = s.slopes(&input[ch * h * w..(ch + 1) * h * w], &r);
        gy += dout[ch] * sy;
        gx += dout[ch] * sx;
    }
    if let Some(di) = dinput {
        for ch in 0..c {
            s.scatter(dout[ch], &mut di[ch * h * w..(ch + 1) * h * w], &r);
        }
    }
    (gy, gx)
}

/// Per-tap, per-output-pixel stencils of a deformable convolution.
/// Offsets are `2*k*k x N x out_h x out_w`, tap-major `(dy, dx)` pairs with
/// taps in row-major kernel order.
fn deform_stencils<T: Scalar>(offsets: &[T], g: &ConvGeom) -> Vec<Stencil<T>> {
    let p = g.out_pixels();
    let op = g.out_plane();
    let mut out = Vec::with_capacity(g.taps() * p);
    for t in 0..g.taps() {
        let (ki, kj) = (t / g.k, t % g.k);
        let dy = &offsets[2 * t * p..(2 * t + 1) * p];
        let dx = &offsets[(2 * t + 1) * p..(2 * t + 2) * p];
        for i in 0..p {
            let (oy, ox) = ((i % op) / g.out_w, i % g.out_w);
            let by = T::lit(oy as f64 + ki as f64 - g.pad as f64);
            let bx = T::lit(ox as f64 + kj as f64 - g.pad as f64);
            out.push(Stencil::at(by + dy[i], bx + dx[i]));
        }
    }
    out
}

/// Readable region of every output pixel (one per column of the unfolded matrix).
fn deform_regions(g: &ConvGeom, bounds: SampleBounds) -> Vec<Region> {
    let op = g.out_plane();
    (0..g.out_pixels())
        .map(|i| match bounds {
            SampleBounds::Image => Region::image(g.height, g.width),
            SampleBounds::Window => {
                let (oy, ox) = ((i % op) / g.out_w, i % g.out_w);
                Region::window(
                    g.height,
                    g.width,
                    oy as isize - g.pad as isize,
                    ox as isize - g.pad as isize,
                    g.k,
                )
            }
        })
        .collect()
}

/// Column matrix of a deformable convolution, laid out like [`im2col`].
pub fn deform_im2col<T: Scalar>(input: &[T], offsets: &[T], g: &ConvGeom, bounds: SampleBounds) -> Vec<T> {
    let p = g.out_pixels();
    let op = g.out_plane();
    let taps = g.taps();
    let stencils = deform_stencils(offsets, g);
    let regions = deform_regions(g, bounds);
    let mut cols = vec![T::zero(); g.col_rows() * p];
    let hw = g.in_plane();
    for c in 0..g.channels {
        for t in 0..taps {
            let row = &mut cols[(c * taps + t) * p..(c * taps + t + 1) * p];
            for (i, (dst, s)) in row.iter_mut().zip(&stencils[t * p..(t + 1) * p]).enumerate() {
                let base = (c * g.batch + i / op) * hw;
                *dst = s.value(&input[base..base + hw], &regions[i]);
            }
        }
    }
    cols
}

/// Adjoint of [`deform_im2col`] with respect to both the input and the offsets.
#[allow(clippy::too_many_arguments)]
pub fn deform_col2im<T: Scalar>(
    input: &[T],
    offsets: &[T],
    dcols: &[T],
    g: &ConvGeom,
    bounds: SampleBounds,
    mut dinput: Option<&mut [T]>,
    mut doffsets: Option<&mut [T]>,
) {
    let p = g.out_pixels();
    let op = g.out_plane();
    let taps = g.taps();
    let stencils = deform_stencils(offsets, g);
    let regions = deform_regions(g, bounds);
    let hw = g.in_plane();
    for c in 0..g.channels {
        for t in 0..taps {
            let grow = &dcols[(c * taps + t) * p..(c * taps + t + 1) * p];
            for (i, (&gv, s)) in grow.iter().zip(&stencils[t * p..(t + 1) * p]).enumerate() {
                if gv == T::zero() {
                    continue;
                }
                let base = (c * g.batch + i / op) * hw;
                if let Some(doff) = doffsets.as_deref_mut() {
                    let (sy, sx) = s.slopes(&input[base..base + hw], &regions[i]);
                    doff[2 * t * p + i] += gv * sy;
                    doff[(2 * t + 1) * p + i] += gv * sx;
                }
                if let Some(di) = dinput.as_deref_mut() {
                    s.scatter(gv, &mut di[base..base + hw], &regions[i]);
                }
            }
        }
    }
}
