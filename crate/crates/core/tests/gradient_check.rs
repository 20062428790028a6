mod common;

use common::{grad_check, Consistency};

fn check_all(consistency: Consistency, models: u64) {
    for seed in 0..models {
        let r = grad_check(seed, consistency);
        assert_eq!(
            r.failures, 0,
            "seed {seed}: {} of {} entries off, worst relative error {:e}",
            r.failures, r.entries, r.worst_rel
        );
    }
}

#[test]
fn x_divergence_objective_matches_finite_differences() {
    check_all(Consistency::XDivergence, 25);
}

#[test]
fn js_objective_matches_finite_differences() {
    check_all(Consistency::Js, 10);
}

#[test]
fn mse_objective_matches_finite_differences() {
    check_all(Consistency::Mse, 10);
}
