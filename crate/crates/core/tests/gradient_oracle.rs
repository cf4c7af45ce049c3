mod common;

use common::oracle_case;
use macc_core::numcore::{finite_diff_grad, grad_check, RngStream, DEFAULT_FD_STEP};
use macc_core::tasks::{generate_task, Batch, TaskFamily};

#[test]
fn task_gradients_match_finite_differences() {
    for family in TaskFamily::ALL {
        let mut rng = RngStream::new(family.index() as u64 + 40);
        for point in 0..100u64 {
            let dims = family.natural_dims().unwrap_or(3);
            let task = generate_task(family, point, dims).unwrap();
            let x: Vec<f64> = (0..dims).map(|_| rng.uniform_range(-1.5, 1.5)).collect();
            let batch = match task.dataset() {
                Some(d) => Batch::Rows((0..d.len()).step_by(7).collect()),
                None => Batch::Full,
            };
            let analytic = task.grad(&x, &batch).unwrap();
            let numeric =
                finite_diff_grad(|p| task.loss(p, &batch).unwrap(), &x, DEFAULT_FD_STEP).unwrap();
            let check = grad_check(&analytic, &numeric, 1e-5).unwrap();
            assert!(
                check.passed,
                "{family} point {point}: rel err {}",
                check.max_rel_err
            );
        }
    }
}

#[test]
fn meta_backward_matches_frozen_replay() {
    for family in TaskFamily::ALL {
        for seed in 0..4 {
            let case = oracle_case(family, 1000 + seed);
            assert!(
                case.passed(),
                "{family} dims {} H {} N {}: rel err {}, identity-zero magnitude {}",
                case.dims,
                case.hidden,
                case.unroll,
                case.max_rel_err,
                case.max_zero_abs
            );
        }
    }
}
