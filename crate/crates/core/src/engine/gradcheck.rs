use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::tape::{Tape, Var};
use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};

/// Options of a central finite-difference gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Magnitudes below this floor are compared absolutely.
    pub floor: f64,
    /// Check at most this many randomly chosen entries.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-4,
            tolerance: 1e-5,
            floor: 1e-3,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub max_relative_error: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

impl GradCheck {
    /// Compares the reverse-mode gradient of `loss_fn` with respect to `param`
    /// against central differences. `loss_fn` records a scalar computation on
    /// the given tape, reading the parameter through the provided handle.
    pub fn run<F>(&self, param: &Tensor<f64>, loss_fn: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let p = tape.param(param);
        let loss = loss_fn(&mut tape, p)?;
        tape.backward(loss)?;
        let analytic: Vec<f64> = tape
            .grad(p)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; param.len()]);
        drop(tape);

        self.compare(param, &analytic, |t| {
            let mut tape = Tape::new();
            let p = tape.leaf(t.clone());
            let loss = loss_fn(&mut tape, p)?;
            Ok(tape.value(loss).data()[0])
        })
    }

    /// Compares a supplied gradient against central differences of `eval`.
    pub fn compare<E>(&self, param: &Tensor<f64>, analytic: &[f64], eval: E) -> Result<GradCheckReport>
    where
        E: Fn(&Tensor<f64>) -> Result<f64>,
    {
        if analytic.len() != param.len() {
            return Err(Error::shape("grad_check", "gradient length differs from parameter size"));
        }
        let mut probe = param.clone();
        let mut eval_at = |i: usize, v: f64| -> Result<f64> {
            let orig = probe.data()[i];
            probe.data_mut()[i] = v;
            let out = eval(&probe);
            probe.data_mut()[i] = orig;
            let out = out?;
            if !out.is_finite() {
                return Err(Error::NonFinite("loss during gradient check".into()));
            }
            Ok(out)
        };

        let indices: Vec<usize> = match self.max_entries {
            Some(n) if n < param.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut idx = sample(&mut rng, param.len(), n).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..param.len()).collect(),
        };

        let mut report = GradCheckReport {
            entries_checked: indices.len(),
            max_relative_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for &i in &indices {
            let orig = param.data()[i];
            let plus = eval_at(i, orig + self.step)?;
            let minus = eval_at(i, orig - self.step)?;
            let numeric = (plus - minus) / (2.0 * self.step);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
            if err > report.max_relative_error || !err.is_finite() {
                report.max_relative_error = err;
                report.worst_entry = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        report.passed = report.max_relative_error < self.tolerance;
        Ok(report)
    }
}
