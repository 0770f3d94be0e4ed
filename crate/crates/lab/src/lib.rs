//! Experiment harness for `meta_attack_core`.
//!
//! - [`config`]: the versioned JSON experiment config.
//! - [`checkpoint`]: binary parameter files with a JSON sidecar.
//! - [`images`]: PGM image pools behind a CSV manifest.
//! - [`run`]: meta-training and the resumable attack grid.
//! - [`records`] and [`report`]: the results CSV and its aggregation.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod images;
pub mod records;
pub mod report;
pub mod run;

pub use error::{LabError, Result};

use meta_attack_core::gradcheck::{self, CheckReport};
use meta_attack_core::OpKind;

/// Seed used by the `gradcheck` command unless told otherwise.
pub const GRADCHECK_SEED: u64 = 20_240_601;

pub fn parse_op(name: &str) -> Option<OpKind> {
    OpKind::ALL.into_iter().find(|k| k.name() == name)
}

/// Runs every finite-difference suite, optionally with one op's backward
/// pass deliberately corrupted.
pub fn gradcheck(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckReport>> {
    Ok(gradcheck::run_all(seed, fault)?)
}

pub fn format_check(report: &CheckReport) -> String {
    format!(
        "{} {:<45} max rel err {:.3e} (tol {:.0e}, {} cases)",
        if report.passed() { "PASS" } else { "FAIL" },
        report.name,
        report.max_rel_error,
        report.tolerance,
        report.cases
    )
}
