//! Collecting consistent disparities around an invalid pixel and labelling
//! which of them carries the true disparity.

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};

/// Number of disparities gathered per invalid pixel.
pub const GATHER_COUNT: usize = 10;

/// Default acceptance half-width of [`make_label`].
pub const DEFAULT_HALF_WIDTH: f32 = 2.0;

/// Ten consistent disparities and the pixels they were read from, in scan
/// order `L1, R1, L2, R2, ...` (see [`gather_valid`]).
#[derive(Clone, Debug, PartialEq)]
pub struct GatherVector {
    pub values: [f32; GATHER_COUNT],
    pub positions: [(usize, usize); GATHER_COUNT],
}

impl GatherVector {
    pub fn mean(&self) -> f32 {
        self.values.iter().sum::<f32>() / GATHER_COUNT as f32
    }
}

/// Valid pixels of one row in the alternating order: left neighbour, right
/// neighbour, next left, next right, ... Once one side runs out the other
/// side continues alone. With `include_center` the pixel at column `x`
/// comes first when it is valid.
fn row_scan(disp: &DisparityMap, x: usize, y: usize, include_center: bool, out: &mut Vec<(usize, usize)>) {
    if include_center && disp.is_valid(x, y) {
        out.push((x, y));
    }
    let w = disp.width();
    let mut left = x; // next candidate is left - 1
    let mut right = x; // next candidate is right + 1
    let next_left = |from: &mut usize| -> Option<usize> {
        while *from > 0 {
            *from -= 1;
            if disp.is_valid(*from, y) {
                return Some(*from);
            }
        }
        None
    };
    let next_right = |from: &mut usize| -> Option<usize> {
        while *from + 1 < w {
            *from += 1;
            if disp.is_valid(*from, y) {
                return Some(*from);
            }
        }
        None
    };
    let (mut l_done, mut r_done) = (false, false);
    while out.len() < GATHER_COUNT && !(l_done && r_done) {
        if !l_done {
            match next_left(&mut left) {
                Some(c) => out.push((c, y)),
                None => l_done = true,
            }
        }
        if out.len() >= GATHER_COUNT {
            break;
        }
        if !r_done {
            match next_right(&mut right) {
                Some(c) => out.push((c, y)),
                None => r_done = true,
            }
        }
    }
}

/// Gathers ten disparities for the invalid pixel `(x, y)`.
///
/// Row `y` is scanned alternately left and right of `x`. If it holds fewer
/// than ten valid pixels the scan continues on rows `y-1, y+1, y-2, y+2, ...`
/// with the same alternation, starting with the pixel in column `x` itself.
/// `Ok(None)` only when the whole map has fewer than ten valid pixels.
pub fn gather_valid(disp: &DisparityMap, x: usize, y: usize) -> Result<Option<GatherVector>> {
    if x >= disp.width() || y >= disp.height() {
        return Err(Error::InvalidArgument(format!(
            "pixel ({}, {}) outside {}x{} map",
            x,
            y,
            disp.width(),
            disp.height()
        )));
    }
    if disp.is_valid(x, y) {
        return Err(Error::InvalidArgument(format!(
            "gather_valid called on valid pixel ({}, {})",
            x, y
        )));
    }
    let mut found = Vec::with_capacity(GATHER_COUNT + 1);
    row_scan(disp, x, y, false, &mut found);
    let h = disp.height();
    let mut step = 1;
    while found.len() < GATHER_COUNT && (step <= y || y + step < h) {
        if step <= y {
            row_scan(disp, x, y - step, true, &mut found);
        }
        if found.len() < GATHER_COUNT && y + step < h {
            row_scan(disp, x, y + step, true, &mut found);
        }
        step += 1;
    }
    if found.len() < GATHER_COUNT {
        return Ok(None);
    }
    found.truncate(GATHER_COUNT);
    let mut g = GatherVector {
        values: [0.0; GATHER_COUNT],
        positions: [(0, 0); GATHER_COUNT],
    };
    for (i, &(px, py)) in found.iter().enumerate() {
        g.values[i] = disp.value(px, py);
        g.positions[i] = (px, py);
    }
    Ok(Some(g))
}

/// Index of the gathered value closest to `d_gt` among those within
/// `half_width`; the earliest index wins ties. `None` discards the sample.
pub fn make_label(values: &[f32], d_gt: f32, half_width: f32) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, v) in values.iter().enumerate() {
        let dist = (v - d_gt).abs();
        if dist <= half_width && best.is_none_or(|(_, b)| dist < b) {
            best = Some((i, dist));
        }
    }
    best.map(|(i, _)| i)
}

/// Inverse-frequency class weights normalised to mean 1 over the observed
/// classes; classes never observed get weight 1.
pub fn compute_class_weights(labels: &[usize]) -> Result<[f64; GATHER_COUNT]> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no training labels".into()));
    }
    let mut counts = [0usize; GATHER_COUNT];
    for &l in labels {
        if l >= GATHER_COUNT {
            return Err(Error::InvalidArgument(format!("label {} out of range", l)));
        }
        counts[l] += 1;
    }
    let total = labels.len() as f64;
    let mut w = [1.0; GATHER_COUNT];
    let observed: Vec<usize> = (0..GATHER_COUNT).filter(|c| counts[*c] > 0).collect();
    for &c in &observed {
        w[c] = total / (GATHER_COUNT as f64 * counts[c] as f64);
    }
    let mean = observed.iter().map(|c| w[*c]).sum::<f64>() / observed.len() as f64;
    for &c in &observed {
        w[c] /= mean;
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: &[Option<f32>]) -> DisparityMap {
        let w = values.len();
        DisparityMap::from_parts(
            w,
            1,
            values.iter().map(|v| v.unwrap_or(0.0)).collect(),
            values.iter().map(|v| v.is_some()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn alternates_left_then_right() {
        let mut vals: Vec<Option<f32>> = (0..21).map(|i| Some(i as f32)).collect();
        vals[10] = None;
        let g = gather_valid(&row(&vals), 10, 0).unwrap().unwrap();
        assert_eq!(g.values, [9.0, 11.0, 8.0, 12.0, 7.0, 13.0, 6.0, 14.0, 5.0, 15.0]);
    }

    #[test]
    fn left_border_takes_everything_from_the_right() {
        let mut vals: Vec<Option<f32>> = (0..15).map(|i| Some(i as f32)).collect();
        vals[0] = None;
        let g = gather_valid(&row(&vals), 0, 0).unwrap().unwrap();
        assert_eq!(g.values, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn valid_pixel_is_rejected() {
        let vals: Vec<Option<f32>> = (0..15).map(|i| Some(i as f32)).collect();
        assert!(gather_valid(&row(&vals), 3, 0).is_err());
    }

    #[test]
    fn too_few_valid_pixels_is_absent() {
        let mut vals: Vec<Option<f32>> = vec![Some(1.0); 9];
        vals.push(None);
        assert_eq!(gather_valid(&row(&vals), 9, 0).unwrap(), None);
    }

    #[test]
    fn sparse_row_falls_back_to_neighbouring_rows() {
        // 3 rows of width 5; middle row has only two valid pixels
        let mut values = vec![0.0; 15];
        let mut valid = vec![true; 15];
        for x in 0..5 {
            values[x] = 100.0 + x as f32;
            values[10 + x] = 200.0 + x as f32;
            values[5 + x] = 150.0 + x as f32;
            valid[5 + x] = x == 0 || x == 4;
        }
        let d = DisparityMap::from_parts(5, 3, values, valid).unwrap();
        let g = gather_valid(&d, 2, 1).unwrap().unwrap();
        assert_eq!(
            g.values,
            [150.0, 154.0, 102.0, 101.0, 103.0, 100.0, 104.0, 202.0, 201.0, 203.0]
        );
    }

    #[test]
    fn label_examples() {
        let g = [5.0, 7.0, 9.0, 14.0, 3.0, 8.0, 22.0, 6.0, 11.0, 7.0];
        assert_eq!(make_label(&g, 9.0, 2.0), Some(2));
        let g = [5.0, 7.0, 9.0, 7.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(make_label(&g, 7.0, 2.0), Some(1));
        assert_eq!(make_label(&[40.0; 10], 7.0, 2.0), None);
        // equal distance on both sides: earliest index
        assert_eq!(make_label(&[6.0, 8.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 7.0, 2.0), Some(0));
    }

    #[test]
    fn class_weight_examples() {
        let w = compute_class_weights(&(0..10).collect::<Vec<_>>()).unwrap();
        assert!(w.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let w = compute_class_weights(&[0, 0, 1]).unwrap();
        assert!((w[1] / w[0] - 2.0).abs() < 1e-12);
        assert!(w[2..].iter().all(|v| *v == 1.0));
        assert!(compute_class_weights(&[]).is_err());
    }
}
