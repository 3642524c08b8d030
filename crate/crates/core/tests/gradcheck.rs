//! Analytic gradients of every graph op against central finite differences
//! of independent f64 reference implementations.

mod common;

use common::gradcheck::{cases, check, check_losses, TOL};

#[test]
fn every_op_matches_finite_differences() {
    for (i, case) in cases().iter().enumerate() {
        let worst = check(case, 1000 + i as u64);
        assert!(worst < TOL, "{}: worst relative error {worst}", case.name);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    check_losses();
}
