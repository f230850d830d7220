//! Executable checks of permutation equivariance, reversal invariance and
//! matched training, plus the training harness they use.

mod checks;
mod train;

use serde::{Deserialize, Serialize};

pub use checks::{
    check_perm_equivariance, check_reversal_invariance, gradient_check,
    independent_curves_comparison, matched_training_check, CurvePoint, CurvesOutcome,
    EquivarianceOptions, InvarianceOptions, InvarianceOutcome, MatchedOptions, MatchedOutcome,
    PermKind, ReversalSetup, EQUIVARIANCE_TOLERANCE, GRADIENT_FLOOR, GRADIENT_TOLERANCE,
    INVARIANCE_TOLERANCE, LOSS_GAP_TOLERANCE, PARAM_DRIFT_TOLERANCE,
};
pub use train::{batch_schedule, mean_token_nll, train, Optimizer, OptimizerKind, TrainConfig};

/// Outcome of one check. `passed` is exactly `max_abs_error <= tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub cases_run: usize,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Inputs of the case with the largest error.
    pub worst_case: serde_json::Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl CheckReport {
    /// Aggregates `(error, inputs)` per case; the first maximal case wins.
    /// A NaN error fails the check.
    pub fn from_cases(
        name: impl Into<String>,
        tolerance: f64,
        cases: Vec<(f64, serde_json::Value)>,
    ) -> Self {
        let cases_run = cases.len();
        let mut max_abs_error = 0.0_f64;
        let mut worst_case = serde_json::Value::Null;
        for (err, inputs) in cases {
            let err = if err.is_nan() { f64::INFINITY } else { err };
            if err > max_abs_error || worst_case.is_null() {
                max_abs_error = max_abs_error.max(err);
                if err >= max_abs_error {
                    worst_case = inputs;
                }
            }
        }
        CheckReport {
            name: name.into(),
            cases_run,
            max_abs_error,
            tolerance,
            passed: max_abs_error <= tolerance,
            worst_case,
            notes: Vec::new(),
        }
    }

    /// One line for terminal output.
    pub fn summary(&self) -> String {
        format!(
            "{} {:<55} cases={:<5} max_err={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases_run,
            self.max_abs_error,
            self.tolerance
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn report_tracks_worst_case() {
        let r = CheckReport::from_cases(
            "x",
            1e-3,
            vec![(1e-5, json!(0)), (2e-4, json!(1)), (1e-4, json!(2))],
        );
        assert!(r.passed);
        assert_eq!(r.cases_run, 3);
        assert_eq!(r.max_abs_error, 2e-4);
        assert_eq!(r.worst_case, json!(1));

        let r = CheckReport::from_cases("x", 1e-3, vec![(f64::NAN, json!("nan"))]);
        assert!(!r.passed);
        assert_eq!(r.worst_case, json!("nan"));

        let r = CheckReport::from_cases("x", 0.0, vec![(0.0, json!(7))]);
        assert!(r.passed);
        assert_eq!(r.worst_case, json!(7));
    }
}
