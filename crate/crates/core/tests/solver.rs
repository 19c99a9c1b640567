mod common;

use cascade_passivity::lmi::{
    certify_point, solve_feasibility, AffineFeasibilityProblem, AffineMatrix, SolveError,
};
use common::*;

#[test]
fn planted_problems_are_solved_and_certified() {
    let mut rng = rng(20_240_501);
    let total = 500;
    let mut solved = 0;
    let mut misses = Vec::new();
    for k in 0..total {
        let (prob, _) = planted_problem(&mut rng);
        let margin = prob.default_margin();
        match solve_feasibility(&prob, margin) {
            Ok(point) => {
                let cert = certify_point(&point.theta, &prob, margin);
                assert!(
                    cert.passed(),
                    "instance {k}: emitted point fails certification: {cert:?}"
                );
                solved += 1;
            }
            Err(SolveError::Infeasible(report)) => misses.push((k, report.best_lambda_min)),
            Err(e) => panic!("instance {k}: {e}"),
        }
    }
    println!("planted instances solved: {solved}/{total}; misses: {misses:?}");
    assert!(
        solved * 100 >= total * 99,
        "solved only {solved}/{total}: {misses:?}"
    );
}

#[test]
fn random_problems_never_emit_uncertified_points() {
    let mut rng = rng(77);
    let mut feasible = 0;
    for k in 0..200 {
        let vars = 1 + k % 6;
        let n = 1 + k % 5;
        let mut expr = AffineMatrix::constant(random_symmetric(&mut rng, n, 2.0));
        for j in 0..vars {
            expr = expr + AffineMatrix::term(j, random_symmetric(&mut rng, n, 1.0));
        }
        let mut prob = AffineFeasibilityProblem::new(vars);
        prob.require_positive(expr);
        // a second, unrelated block makes infeasible instances common
        let mut other = AffineMatrix::constant(random_symmetric(&mut rng, 2, 1.0));
        for j in 0..vars {
            other = other + AffineMatrix::term(j, random_symmetric(&mut rng, 2, 0.5));
        }
        prob.require_positive(other);
        let margin = prob.default_margin();
        if let Ok(point) = solve_feasibility(&prob, margin) {
            feasible += 1;
            assert!(
                certify_point(&point.theta, &prob, margin).passed(),
                "instance {k}"
            );
        }
    }
    println!("random instances with a certified point: {feasible}/200");
}

#[test]
fn solver_is_deterministic() {
    let (prob, _) = planted_problem(&mut rng(5));
    let margin = prob.default_margin();
    let a = solve_feasibility(&prob, margin).unwrap();
    let b = solve_feasibility(&prob, margin).unwrap();
    assert_eq!(a, b);
}
