//! Cost volumes, winner-takes-all and the left-right consistency check.

use rayon::prelude::*;

use crate::disparity::DisparityMap;
use crate::engine::{Padding, Tensor};
use crate::engine::tape::cosine_slice;
use crate::error::{Error, Result};
use crate::net::similarity::SimilarityNet;
use crate::scalar::Scalar;

/// Which image a cost volume (and the disparity map derived from it) is indexed by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Candidate `d` at left pixel `x` is right pixel `x - d`.
    LeftReference,
    /// Candidate `d` at right pixel `x` is left pixel `x + d`.
    RightReference,
}

/// `d_max x H x W` similarity scores; out-of-image candidates hold `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume<T> {
    pub d_max: usize,
    pub height: usize,
    pub width: usize,
    pub direction: Direction,
    pub scores: Vec<T>,
}

impl<T: Scalar> CostVolume<T> {
    pub fn new(d_max: usize, height: usize, width: usize, direction: Direction, scores: Vec<T>) -> Result<Self> {
        if scores.len() != d_max * height * width {
            return Err(Error::shape("cost_volume", "score count does not match D x H x W"));
        }
        Ok(CostVolume {
            d_max,
            height,
            width,
            direction,
            scores,
        })
    }

    pub fn at(&self, d: usize, y: usize, x: usize) -> T {
        self.scores[(d * self.height + y) * self.width + x]
    }

    pub fn slice(&self, d: usize) -> &[T] {
        let n = self.height * self.width;
        &self.scores[d * n..(d + 1) * n]
    }

    /// Column of the other image read by candidate `d` at column `x`, if inside.
    pub fn candidate_column(&self, x: usize, d: usize) -> Option<usize> {
        candidate_column(self.direction, self.width, x, d)
    }
}

fn candidate_column(direction: Direction, width: usize, x: usize, d: usize) -> Option<usize> {
    match direction {
        Direction::LeftReference => x.checked_sub(d),
        Direction::RightReference => Some(x + d).filter(|&c| c < width),
    }
}

/// `out[.., x] = t[.., x - shift]`, zero where the source column is outside.
pub fn shift_columns<T: Scalar>(t: &Tensor<T>, shift: isize) -> Result<Tensor<T>> {
    let (_, h, w) = t.dims3("shift_columns")?;
    t.window(0, -shift, h, w)
}

fn check_features<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, d_max: usize) -> Result<(usize, usize, usize)> {
    let (c, h, w) = a.dims3("build_cost_volume")?;
    if b.shape() != a.shape() {
        return Err(Error::shape(
            "build_cost_volume",
            format!("feature shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if d_max == 0 {
        return Err(Error::InvalidArgument("d_max must be at least 1".into()));
    }
    if d_max > w {
        return Err(Error::InvalidArgument(format!(
            "d_max {} exceeds image width {}",
            d_max, w
        )));
    }
    Ok((c, h, w))
}

fn mark_out_of_range<T: Scalar>(slice: &mut [T], direction: Direction, h: usize, w: usize, d: usize) {
    for y in 0..h {
        for x in 0..w {
            if candidate_column(direction, w, x, d).is_none() {
                slice[y * w + x] = T::neg_infinity();
            }
        }
    }
}

/// Similarity of every pixel of `feat_ref` with each of its `d_max`
/// candidates in `feat_other`. Each slice is one full-image pass of the
/// similarity network (zero-pad-same) over the shifted concatenation, always
/// ordered (left-image features, right-image features).
pub fn build_cost_volume<T: Scalar>(
    net: &SimilarityNet<T>,
    feat_ref: &Tensor<T>,
    feat_other: &Tensor<T>,
    d_max: usize,
    direction: Direction,
) -> Result<CostVolume<T>> {
    let (_, h, w) = check_features(feat_ref, feat_other, d_max)?;
    let slices: Vec<Vec<T>> = (0..d_max)
        .into_par_iter()
        .map(|d| -> Result<Vec<T>> {
            let (left, right) = match direction {
                Direction::LeftReference => (feat_ref.clone(), shift_columns(feat_other, d as isize)?),
                Direction::RightReference => (shift_columns(feat_other, -(d as isize))?, feat_ref.clone()),
            };
            let mut s = net.score_map(&left, &right, Padding::Same)?.into_data();
            mark_out_of_range(&mut s, direction, h, w, d);
            Ok(s)
        })
        .collect::<Result<_>>()?;
    CostVolume::new(d_max, h, w, direction, slices.concat())
}

/// Cost volume from the per-pixel cosine of feature vectors (no learned head).
pub fn cosine_similarity_volume<T: Scalar>(
    feat_ref: &Tensor<T>,
    feat_other: &Tensor<T>,
    d_max: usize,
    direction: Direction,
) -> Result<CostVolume<T>> {
    let (c, h, w) = check_features(feat_ref, feat_other, d_max)?;
    let pixel = |t: &Tensor<T>, y: usize, x: usize| -> Vec<T> { (0..c).map(|ch| t.at3(ch, y, x)).collect() };
    let slices: Vec<Vec<T>> = (0..d_max)
        .into_par_iter()
        .map(|d| {
            let mut s = vec![T::neg_infinity(); h * w];
            for y in 0..h {
                for x in 0..w {
                    if let Some(xc) = candidate_column(direction, w, x, d) {
                        s[y * w + x] = cosine_slice(&pixel(feat_ref, y, x), &pixel(feat_other, y, xc));
                    }
                }
            }
            s
        })
        .collect();
    CostVolume::new(d_max, h, w, direction, slices.concat())
}

/// Argmax over disparities; ties go to the smaller disparity. Pixels whose
/// candidates are all `-inf` (or NaN) are invalid.
pub fn wta_disparity<T: Scalar>(volume: &CostVolume<T>) -> DisparityMap {
    let (h, w) = (volume.height, volume.width);
    let mut map = DisparityMap::invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(usize, T)> = None;
            for d in 0..volume.d_max {
                let s = volume.at(d, y, x);
                if !s.is_finite() {
                    continue;
                }
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((d, s));
                }
            }
            if let Some((d, _)) = best {
                map.set(x, y, d as f32);
            }
        }
    }
    map
}

/// Keeps a left-map pixel iff its match `x - d_L` lies inside the right map,
/// is valid there, and `|d_L - d_R(x - d_L)| <= tau`. Surviving values are
/// untouched.
pub fn lr_consistency(left: &DisparityMap, right: &DisparityMap, tau: f32) -> Result<DisparityMap> {
    if !left.same_size(right) {
        return Err(Error::shape("lr_consistency", "left and right maps differ in size"));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {}", tau)));
    }
    let mut out = left.clone();
    for y in 0..left.height() {
        for x in 0..left.width() {
            let Some(dl) = left.get(x, y) else { continue };
            let xr = x as f32 - dl.round();
            let keep = xr >= 0.0
                && (xr as usize) < right.width()
                && right
                    .get(xr as usize, y)
                    .is_some_and(|dr| (dl - dr).abs() <= tau);
            if !keep {
                out.invalidate(x, y);
            }
        }
    }
    Ok(out)
}
