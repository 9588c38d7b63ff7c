//! Reverse-mode gradients against central finite differences.

mod common;

#[test]
fn elementwise_ops() {
    common::grad::elementwise_ops();
}

#[test]
fn reductions_and_reshaping() {
    common::grad::reductions_and_reshaping();
}

#[test]
fn matrix_products() {
    common::grad::matrix_products();
}

#[test]
fn constrained_rational_unit() {
    common::grad::constrained_rational_unit();
}

#[test]
fn constrained_unit_interval_rational() {
    common::grad::constrained_unit_interval_rational();
}

#[test]
fn coupling_architectures() {
    common::grad::coupling_architectures();
}

#[test]
fn training_objective_dim_two_batch_eight() {
    common::grad::training_objective_dim_two_batch_eight();
}
