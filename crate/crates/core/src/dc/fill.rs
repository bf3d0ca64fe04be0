use rayon::prelude::*;

use crate::disparity::DisparityMap;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::net::normalize_image;
use crate::scalar::Scalar;

use super::gather::{gather_valid, make_label, GatherVector, GATHER_COUNT};
use super::net::{argmax, DcNet, DC_CHANNELS, DC_PATCH};

/// Gathered disparities are centred on the mean of the centre pixel's vector
/// and divided by this, so the network sees offsets of a few units.
pub const DISPARITY_SCALE: f32 = 4.0;

/// Inference batch size for [`fill_disparities`].
const FILL_BATCH: usize = 512;

/// Gather vectors of every invalid pixel of a sparse map, all computed from
/// its original mask.
#[derive(Clone, Debug)]
pub struct GatherField {
    disp: DisparityMap,
    gathers: Vec<Option<GatherVector>>,
}

impl GatherField {
    pub fn new(disp: &DisparityMap) -> Result<Self> {
        let w = disp.width();
        let gathers = (0..w * disp.height())
            .into_par_iter()
            .map(|i| {
                let (x, y) = (i % w, i / w);
                if disp.is_valid(x, y) {
                    Ok(None)
                } else {
                    gather_valid(disp, x, y)
                }
            })
            .collect::<Result<_>>()?;
        Ok(GatherField {
            disp: disp.clone(),
            gathers,
        })
    }

    pub fn map(&self) -> &DisparityMap {
        &self.disp
    }

    pub fn gather(&self, x: usize, y: usize) -> Option<&GatherVector> {
        self.gathers[self.disp.index(x, y)].as_ref()
    }

    /// Invalid pixels that received a gather vector, row-major.
    pub fn holes(&self) -> Vec<(usize, usize)> {
        let w = self.disp.width();
        (0..self.gathers.len())
            .filter(|i| self.gathers[*i].is_some())
            .map(|i| (i % w, i / w))
            .collect()
    }

    /// The `13 x 7 x 7` network input centred on the invalid pixel `(x, y)`.
    ///
    /// Each window pixel contributes ten gather channels: its own gather
    /// vector when invalid, its own disparity repeated when valid, zeros
    /// outside the image. The last three channels are the normalised image.
    pub fn input<T: Scalar>(&self, image: &Tensor<T>, x: usize, y: usize) -> Result<Tensor<T>> {
        let center = self.gather(x, y).ok_or_else(|| {
            Error::InvalidArgument(format!("pixel ({}, {}) has no gather vector", x, y))
        })?;
        let (ic, ih, iw) = image.dims3("dc_input")?;
        if ic != 3 || ih != self.disp.height() || iw != self.disp.width() {
            return Err(Error::shape(
                "dc_input",
                format!(
                    "image {:?} does not match {}x{} map",
                    image.shape(),
                    self.disp.width(),
                    self.disp.height()
                ),
            ));
        }
        let m = center.mean();
        let r = (DC_PATCH / 2) as isize;
        let plane = DC_PATCH * DC_PATCH;
        let mut data = vec![T::zero(); DC_CHANNELS * plane];
        for wy in 0..DC_PATCH {
            for wx in 0..DC_PATCH {
                let sx = x as isize + wx as isize - r;
                let sy = y as isize + wy as isize - r;
                if sx < 0 || sy < 0 || sx as usize >= iw || sy as usize >= ih {
                    continue;
                }
                let (sx, sy) = (sx as usize, sy as usize);
                let at = wy * DC_PATCH + wx;
                let scaled = |d: f32| T::lit(((d - m) / DISPARITY_SCALE) as f64);
                match self.disp.get(sx, sy) {
                    Some(d) => (0..GATHER_COUNT).for_each(|c| data[c * plane + at] = scaled(d)),
                    None => {
                        if let Some(g) = self.gather(sx, sy) {
                            (0..GATHER_COUNT).for_each(|c| data[c * plane + at] = scaled(g.values[c]));
                        }
                    }
                }
                for c in 0..3 {
                    data[(GATHER_COUNT + c) * plane + at] = image.at3(c, sy, sx);
                }
            }
        }
        Tensor::new([DC_CHANNELS, DC_PATCH, DC_PATCH], data)
    }
}

/// One labelled completion example.
#[derive(Clone, Debug, PartialEq)]
pub struct DcSample<T> {
    /// `13 x 7 x 7`.
    pub input: Tensor<T>,
    pub label: usize,
}

/// Labelled examples from a sparse map and its ground truth.
#[derive(Clone, Debug)]
pub struct LabelledHoles<T> {
    pub samples: Vec<DcSample<T>>,
    /// Holes with ground truth but no gathered value within the acceptance range.
    pub discarded: usize,
}

/// Builds one example per invalid pixel of `sparse` that has ground truth
/// and a gathered value within `half_width` of it. `image` is unnormalised.
pub fn labelled_holes<T: Scalar>(
    sparse: &DisparityMap,
    image: &Tensor<T>,
    gt: &DisparityMap,
    half_width: f32,
) -> Result<LabelledHoles<T>> {
    if !sparse.same_size(gt) {
        return Err(Error::shape("labelled_holes", "sparse map and ground truth differ in size"));
    }
    let field = GatherField::new(sparse)?;
    let image = normalize_image(image)?;
    let mut samples = Vec::new();
    let mut discarded = 0;
    for (x, y) in field.holes() {
        let Some(d_gt) = gt.get(x, y) else { continue };
        let g = field.gather(x, y).expect("holes have gathers");
        match make_label(&g.values, d_gt, half_width) {
            Some(label) => samples.push(DcSample {
                input: field.input(&image, x, y)?,
                label,
            }),
            None => discarded += 1,
        }
    }
    Ok(LabelledHoles { samples, discarded })
}

/// Fills every invalid pixel with the gathered disparity the network ranks
/// highest. Gathers read only the original mask, so the result does not
/// depend on the order holes are visited. With fewer than ten valid pixels
/// the map is returned unchanged.
pub fn fill_disparities<T: Scalar>(disp: &DisparityMap, image: &Tensor<T>, net: &DcNet<T>) -> Result<DisparityMap> {
    if disp.valid_count() < GATHER_COUNT {
        log::warn!(
            "fill_disparities: only {} valid pixels, returning the map unchanged",
            disp.valid_count()
        );
        return Ok(disp.clone());
    }
    let field = GatherField::new(disp)?;
    let image = normalize_image(image)?;
    let holes = field.holes();
    let picks: Vec<Vec<f32>> = holes
        .par_chunks(FILL_BATCH)
        .map(|chunk| -> Result<Vec<f32>> {
            let inputs = chunk
                .iter()
                .map(|&(x, y)| field.input(&image, x, y))
                .collect::<Result<Vec<_>>>()?;
            let probs = net.predict(&inputs)?;
            Ok(chunk
                .iter()
                .zip(&probs)
                .map(|(&(x, y), p)| field.gather(x, y).expect("holes have gathers").values[argmax(p)])
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut out = disp.clone();
    for (&(x, y), v) in holes.iter().zip(picks.concat()) {
        out.set(x, y, v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sparse(w: usize, h: usize, keep: f64, rng: &mut ChaCha8Rng) -> DisparityMap {
        let mut m = DisparityMap::invalid(w, h);
        for y in 0..h {
            for x in 0..w {
                if rng.gen_bool(keep) {
                    m.set(x, y, rng.gen_range(0..30) as f32);
                }
            }
        }
        m
    }

    #[test]
    fn dense_input_is_returned_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = sparse(12, 9, 1.0, &mut rng);
        let net = DcNet::<f32>::new([8, 8], &mut rng);
        let img = Tensor::uniform([3, 9, 12], 1.0, &mut rng);
        assert_eq!(fill_disparities(&d, &img, &net).unwrap(), d);
    }

    #[test]
    fn filled_values_come_from_own_gather_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = sparse(20, 15, 0.5, &mut rng);
        let net = DcNet::<f32>::new([8, 8], &mut rng);
        let img = Tensor::uniform([3, 15, 20], 1.0, &mut rng);
        let out = fill_disparities(&d, &img, &net).unwrap();
        assert_eq!(out.density(), 1.0);
        for y in 0..15 {
            for x in 0..20 {
                if d.is_valid(x, y) {
                    assert_eq!(out.value(x, y), d.value(x, y));
                } else {
                    let g = gather_valid(&d, x, y).unwrap().unwrap();
                    assert!(g.values.contains(&out.value(x, y)));
                }
            }
        }
    }

    #[test]
    fn too_sparse_map_is_left_alone() {
        let mut d = DisparityMap::invalid(8, 8);
        d.set(1, 1, 3.0);
        let net = DcNet::<f32>::zeros([4, 4]);
        let out = fill_disparities(&d, &Tensor::zeros([3, 8, 8]), &net).unwrap();
        assert_eq!(out, d);
    }

    #[test]
    fn input_window_layout() {
        let mut d = DisparityMap::dense(9, 9, vec![8.0; 81]).unwrap();
        d.invalidate(0, 0);
        let field = GatherField::new(&d).unwrap();
        let img = Tensor::<f64>::full([3, 9, 9], 0.5);
        let t = field.input(&img, 0, 0).unwrap();
        // top-left 3x3 of the window lies outside the image
        assert_eq!(t.at3(0, 0, 0), 0.0);
        assert_eq!(t.at3(GATHER_COUNT, 2, 2), 0.0);
        assert_eq!(t.at3(GATHER_COUNT, 3, 3), 0.5);
        // every gathered value equals the centre mean, so all offsets vanish
        assert_eq!(t.at3(4, 3, 4), 0.0);
        assert_eq!(t.at3(4, 3, 3), 0.0);
    }
}
