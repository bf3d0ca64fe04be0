//! n-point error: the share of evaluated pixels whose disparity is off by
//! more than `n`.

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};

/// Thresholds reported by [`evaluate`].
pub const PE_THRESHOLDS: [f32; 4] = [0.5, 1.0, 2.0, 4.0];

/// What to do with pixels that have ground truth but no prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InvalidPolicy {
    /// Count them as wrong at every threshold.
    CountAsError,
    /// Leave them out, i.e. score the prediction on its own valid domain.
    Exclude,
}

fn check(pred: &DisparityMap, gt: &DisparityMap, mask: Option<&[bool]>) -> Result<()> {
    if !pred.same_size(gt) {
        return Err(Error::shape("n_point_error", "prediction and ground truth differ in size"));
    }
    if mask.is_some_and(|m| m.len() != gt.mask().len()) {
        return Err(Error::shape("n_point_error", "evaluation mask has the wrong size"));
    }
    Ok(())
}

/// Percentage in `[0, 100]` over pixels with valid ground truth (and inside
/// `mask`, when given).
pub fn n_point_error(
    pred: &DisparityMap,
    gt: &DisparityMap,
    n: f32,
    policy: InvalidPolicy,
    mask: Option<&[bool]>,
) -> Result<f64> {
    check(pred, gt, mask)?;
    let (mut bad, mut total) = (0usize, 0usize);
    for i in 0..gt.mask().len() {
        if !gt.mask()[i] || mask.is_some_and(|m| !m[i]) {
            continue;
        }
        if !pred.mask()[i] {
            if policy == InvalidPolicy::CountAsError {
                bad += 1;
                total += 1;
            }
            continue;
        }
        total += 1;
        if (pred.values()[i] - gt.values()[i]).abs() > n {
            bad += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument("no pixels to evaluate".into()));
    }
    Ok(100.0 * bad as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `(n, percentage)` for each of [`PE_THRESHOLDS`].
    pub errors: Vec<(f32, f64)>,
    pub evaluated: usize,
    /// Ground-truth pixels left out (outside the mask, or unpredicted under
    /// [`InvalidPolicy::Exclude`]).
    pub excluded: usize,
    /// Valid fraction of the prediction.
    pub density: f64,
}

pub fn evaluate(pred: &DisparityMap, gt: &DisparityMap, policy: InvalidPolicy, mask: Option<&[bool]>) -> Result<EvalReport> {
    check(pred, gt, mask)?;
    let errors = PE_THRESHOLDS
        .iter()
        .map(|&n| n_point_error(pred, gt, n, policy, mask).map(|e| (n, e)))
        .collect::<Result<Vec<_>>>()?;
    let gt_pixels = gt.valid_count();
    let evaluated = (0..gt.mask().len())
        .filter(|&i| {
            gt.mask()[i]
                && mask.is_none_or(|m| m[i])
                && (policy == InvalidPolicy::CountAsError || pred.mask()[i])
        })
        .count();
    Ok(EvalReport {
        errors,
        evaluated,
        excluded: gt_pixels - evaluated,
        density: pred.density(),
    })
}

impl EvalReport {
    pub fn error_at(&self, n: f32) -> Option<f64> {
        self.errors.iter().find(|(t, _)| *t == n).map(|(_, e)| *e)
    }

    /// `name<TAB>value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (n, e) in &self.errors {
            s.push_str(&format!("pe_{}\t{:.4}\n", n, e));
        }
        s.push_str(&format!("evaluated\t{}\n", self.evaluated));
        s.push_str(&format!("excluded\t{}\n", self.excluded));
        s.push_str(&format!("density\t{:.6}\n", self.density));
        s
    }

    pub fn to_table(&self) -> String {
        let head: Vec<String> = self.errors.iter().map(|(n, _)| format!("{:>8}", format!("{}-PE", n))).collect();
        let vals: Vec<String> = self.errors.iter().map(|(_, e)| format!("{:>7.2}%", e)).collect();
        format!(
            "{}\n{}\nevaluated {} px, excluded {} px, density {:.1}%\n",
            head.join(" "),
            vals.join(" "),
            self.evaluated,
            self.excluded,
            100.0 * self.density
        )
    }
}
