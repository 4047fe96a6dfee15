mod common;

use acts::dataset::IncidenceKind;
use common::{joint_loss_check, op_checks, TOL};

#[test]
fn every_op_matches_finite_differences() {
    for (name, worst) in op_checks() {
        assert!(worst < TOL, "{name}: relative error {worst:e}");
    }
}

#[test]
fn joint_loss_daily() {
    let worst = joint_loss_check(IncidenceKind::Hospitalizations, 1);
    assert!(worst < TOL, "relative error {worst:e}");
}

#[test]
fn joint_loss_weekly_second_week() {
    let worst = joint_loss_check(IncidenceKind::Deaths, 2);
    assert!(worst < TOL, "relative error {worst:e}");
}
