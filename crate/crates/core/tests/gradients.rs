//! Finite-difference checks of every differentiable op and of the composite layers.

mod common;

use common::{failures, Checks};

fn assert_all_pass(checks: msbt::Result<Checks>) {
    let checks = checks.unwrap();
    assert!(!checks.is_empty());
    let bad = failures(&checks);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn elementwise_binary_ops() {
    assert_all_pass(common::elementwise_binary());
}

#[test]
fn unary_ops() {
    assert_all_pass(common::unary());
}

#[test]
fn matmul_concat_layernorm_cosine() {
    assert_all_pass(common::structural());
}

#[test]
fn tcc_and_mil_losses() {
    assert_all_pass(common::losses());
}

#[test]
fn transformer_and_cross_transformer() {
    assert_all_pass(common::attention());
}
