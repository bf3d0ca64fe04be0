//! Deliberately naive reference implementations used only to cross-check
//! the production code. They share no code with it.

use crate::disparity::DisparityMap;

/// Gather by explicit list building: all valid columns left of `x` sorted
/// nearest first, the same on the right, then interleaved.
pub fn gather_reference(map: &DisparityMap, x: usize, y: usize) -> Option<Vec<f32>> {
    let w = map.width() as isize;
    let h = map.height() as isize;
    let row_order = |row: isize, with_center: bool| -> Vec<f32> {
        let valid = |c: isize| c >= 0 && c < w && map.is_valid(c as usize, row as usize);
        let lefts: Vec<isize> = (1..=w).map(|k| x as isize - k).filter(|c| valid(*c)).collect();
        let rights: Vec<isize> = (1..=w).map(|k| x as isize + k).filter(|c| valid(*c)).collect();
        let mut cols = Vec::new();
        if with_center && valid(x as isize) {
            cols.push(x as isize);
        }
        for k in 0..lefts.len().max(rights.len()) {
            if k < lefts.len() {
                cols.push(lefts[k]);
            }
            if k < rights.len() {
                cols.push(rights[k]);
            }
        }
        cols.iter().map(|c| map.value(*c as usize, row as usize)).collect()
    };
    let mut rows = vec![(y as isize, false)];
    for k in 1..h {
        rows.push((y as isize - k, true));
        rows.push((y as isize + k, true));
    }
    let mut out = Vec::new();
    for (r, center) in rows {
        if r < 0 || r >= h {
            continue;
        }
        out.extend(row_order(r, center));
    }
    if out.len() < 10 {
        None
    } else {
        out.truncate(10);
        Some(out)
    }
}

/// Label by computing every distance first.
pub fn label_reference(values: &[f32], d_gt: f32, half_width: f32) -> Option<usize> {
    let dist: Vec<f32> = values.iter().map(|v| (v - d_gt).abs()).collect();
    let best = dist.iter().cloned().filter(|d| *d <= half_width).fold(f32::INFINITY, f32::min);
    if best.is_infinite() {
        return None;
    }
    dist.iter().position(|d| *d == best)
}

/// Percentage of wrong pixels by a plain double loop over rows and columns.
pub fn n_pe_reference(pred: &DisparityMap, gt: &DisparityMap, n: f32, holes_are_errors: bool) -> Option<f64> {
    let mut bad = 0.0;
    let mut all = 0.0;
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            if !gt.is_valid(x, y) {
                continue;
            }
            if pred.is_valid(x, y) {
                all += 1.0;
                if (pred.value(x, y) - gt.value(x, y)).abs() > n {
                    bad += 1.0;
                }
            } else if holes_are_errors {
                all += 1.0;
                bad += 1.0;
            }
        }
    }
    (all > 0.0).then(|| bad * 100.0 / all)
}

/// Big-endian, top-row-last float map writer in the style of common
/// reference scripts.
pub fn pfm_reference_writer(width: usize, height: usize, channels: usize, data: &[f32]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(if channels == 3 { b"PF\n" } else { b"Pf\n" });
    out.extend_from_slice(format!("{} {}\n1.000000\n", width, height).as_bytes());
    for y in (0..height).rev() {
        for i in 0..width * channels {
            out.extend_from_slice(&data[y * width * channels + i].to_be_bytes());
        }
    }
    out
}
