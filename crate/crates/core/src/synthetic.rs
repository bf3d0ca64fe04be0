//! Synthetic rectified stereo pairs with known disparity: a fronto-parallel
//! background plus rectangles floating in front of it, rendered by forward
//! warping the left view with a z-buffer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::disparity::DisparityMap;
use crate::engine::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Disparities are integers in `[0, d_max)`.
    pub d_max: usize,
    pub rectangles: usize,
    /// Radius of the box blur applied to the white-noise texture.
    pub blur: usize,
    /// Standard deviation of the independent per-view noise (texture is in `[0, 1]`).
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 96,
            height: 96,
            d_max: 16,
            rectangles: 4,
            blur: 1,
            noise: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticPair {
    /// `3 x H x W`.
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    /// Dense left-view ground truth.
    pub gt: DisparityMap,
    /// Left pixels hidden in the right view (row-major).
    pub occluded: Vec<bool>,
}

/// Three-channel texture in `[0, 1]`.
fn texture<R: Rng + ?Sized>(w: usize, h: usize, blur: usize, rng: &mut R) -> Vec<f32> {
    let mut out = Vec::with_capacity(3 * w * h);
    for _ in 0..3 {
        let noise: Vec<f32> = (0..w * h).map(|_| rng.gen::<f32>()).collect();
        let plane = box_blur(&noise, w, h, blur);
        let (lo, hi) = plane
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        let span = (hi - lo).max(1e-6);
        out.extend(plane.iter().map(|v| (v - lo) / span));
    }
    out
}

fn box_blur(src: &[f32], w: usize, h: usize, r: usize) -> Vec<f32> {
    if r == 0 {
        return src.to_vec();
    }
    let pass = |src: &[f32], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut n) = (0.0, 0.0);
                for o in -(r as isize)..=r as isize {
                    let (sx, sy) = if horizontal {
                        (x as isize + o, y as isize)
                    } else {
                        (x as isize, y as isize + o)
                    };
                    if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                        acc += src[sy as usize * w + sx as usize];
                        n += 1.0;
                    }
                }
                out[y * w + x] = acc / n;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Piecewise-constant integer disparity: background in the lower quarter of
/// the range, rectangles strictly nearer than the background.
fn disparity_layout<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Vec<u32> {
    let (w, h) = (spec.width, spec.height);
    let top = spec.d_max as u32;
    let bg = rng.gen_range(0..(top / 4).max(1));
    let mut d = vec![bg; w * h];
    for _ in 0..spec.rectangles {
        let rw = rng.gen_range(w / 6..=w / 2);
        let rh = rng.gen_range(h / 6..=h / 2);
        let x0 = rng.gen_range(0..=w - rw);
        let y0 = rng.gen_range(0..=h - rh);
        let v = rng.gen_range((bg + 2).min(top - 1)..top);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                d[y * w + x] = v;
            }
        }
    }
    d
}

pub fn generate_pair<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<SyntheticPair> {
    let (w, h) = (spec.width, spec.height);
    if spec.d_max < 2 || spec.d_max >= w || h < 6 || w < 6 {
        return Err(Error::InvalidArgument(format!(
            "scene {}x{} cannot hold disparities below {}",
            w, h, spec.d_max
        )));
    }
    let disp = disparity_layout(spec, rng);
    let left = texture(w, h, spec.blur, rng);
    // disoccluded right pixels show texture never seen from the left
    let mut right = texture(w, h, spec.blur, rng);
    let mut zbuf = vec![-1i64; w * h];
    for y in 0..h {
        for x in 0..w {
            let d = disp[y * w + x] as i64;
            let xr = x as i64 - d;
            if xr < 0 || d <= zbuf[y * w + xr as usize] {
                continue;
            }
            zbuf[y * w + xr as usize] = d;
            for c in 0..3 {
                right[(c * h + y) * w + xr as usize] = left[(c * h + y) * w + x];
            }
        }
    }
    let occluded = (0..w * h)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let d = disp[i] as i64;
            x as i64 - d < 0 || zbuf[y * w + (x as i64 - d) as usize] != d
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut add_noise = |img: &mut Vec<f32>| {
        if spec.noise > 0.0 {
            img.iter_mut().for_each(|v| *v += noise.sample(rng) as f32);
        }
    };
    let mut left = left;
    add_noise(&mut left);
    add_noise(&mut right);
    Ok(SyntheticPair {
        left: Tensor::new([3, h, w], left)?,
        right: Tensor::new([3, h, w], right)?,
        gt: DisparityMap::dense(w, h, disp.iter().map(|v| *v as f32).collect())?,
        occluded,
    })
}
