mod support;

use support::grad_suite::{worst_error, CASES};

#[test]
fn autodiff_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in CASES {
        let e = worst_error(case);
        if !(e <= 1e-6) {
            failures.push(format!("{case}: {e:.3e}"));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}
