mod common;

use avalign::model::{hybrid_loss, LossWeights};
use avalign::tensor::{grad_check, Graph, Tensor};
use common::{hybrid_grad_check, op_cases, tiny_s3};

#[test]
fn every_op_matches_finite_differences_at_ten_points() {
    for case in op_cases() {
        let err = case.check(0..10);
        assert!(err <= 1e-5, "{}: relative error {err:e}", case.name);
    }
}

#[test]
fn full_s3_objective_matches_finite_differences() {
    let err = hybrid_grad_check(&tiny_s3(3));
    assert!(err <= 1e-5, "relative error {err:e}");
}

#[test]
fn hybrid_combination_gradient_is_the_weights() {
    let w = LossWeights::LRS2;
    let point = Tensor::vector(vec![1.3, 0.4, 2.2]).unwrap();
    let err = grad_check(
        |g: &mut Graph, x| {
            let parts: Vec<_> = (0..3).map(|i| g.slice(x, 0, i, i + 1)).collect::<Result<_, _>>()?;
            let s: Vec<_> = parts.into_iter().map(|p| g.sum(p)).collect::<Result<_, _>>()?;
            Ok(hybrid_loss(g, s[0], s[1], Some(s[2]), &w).unwrap())
        },
        &point,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-9);
}
