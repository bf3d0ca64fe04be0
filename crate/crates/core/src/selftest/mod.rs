//! The acceptance suite: ten numbered checks of gradients, geometry, budget,
//! training behaviour, completion rules, metrics, file formats and
//! reproducibility. Shared by the `acceptance` test target and the
//! `selftest` command.

pub mod oracles;

mod checks;
mod overfit;

use std::time::Instant;

pub use checks::*;
pub use overfit::{interior_accuracy, overfit_pair, OverfitConfig, OverfitRun};

/// Outcome of one criterion. `log` holds only reproducible lines (no
/// timings), so two runs with one seed can be compared verbatim.
#[derive(Clone, Debug)]
pub struct CriterionReport {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub log: Vec<String>,
    pub seconds: f64,
}

impl CriterionReport {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {:<28} {}  {} ({:.1}s)",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail,
            self.seconds
        )
    }
}

/// Passed/failed plus evidence, built by each check.
pub(crate) struct Verdict {
    pub passed: bool,
    pub detail: String,
    pub log: Vec<String>,
}

pub(crate) fn timed(id: u8, name: &'static str, f: impl FnOnce() -> crate::Result<Verdict>) -> CriterionReport {
    let t0 = Instant::now();
    let (passed, detail, log) = match f() {
        Ok(v) => (v.passed, v.detail, v.log),
        Err(e) => (false, format!("error: {}", e), vec![format!("error: {}", e)]),
    };
    CriterionReport {
        id,
        name,
        passed,
        detail,
        log,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

#[derive(Clone, Debug)]
#[derive(Default)]
pub struct SuiteOptions {
    pub seed: u64,
    pub overfit: OverfitConfig,
}


/// Runs criteria 1 to 10 in order, handing each report to `sink` as soon as
/// it is available.
pub fn run_suite(opts: &SuiteOptions, mut sink: impl FnMut(&CriterionReport)) -> Vec<CriterionReport> {
    let mut out = Vec::new();
    let mut emit = |r: CriterionReport| {
        sink(&r);
        out.push(r);
    };
    emit(gradient_correctness(opts.seed));
    emit(deformable_identity(opts.seed));
    emit(receptive_field(opts.seed));
    emit(parameter_budget());
    let (report, trained) = synthetic_overfit(&opts.overfit, opts.seed);
    emit(report);
    emit(completion_oracle(opts.seed));
    emit(completion_training(opts.seed));
    emit(completion_benefit(&opts.overfit, trained.as_ref(), opts.seed));
    emit(metric_and_io_oracles(opts.seed));
    emit(determinism(&opts.overfit, opts.seed));
    out
}
