use proptest::prelude::*;

use macc_core::learned_optimizer::{
    decode_checkpoint, encode_checkpoint, init_params, optimizer_step, preprocess_gradient,
    OptimizerParams, OptimizerState, FEATURE_CLAMP,
};
use macc_core::numcore::{norm2, Mat64, RngStream};
use macc_core::tasks::{generate_task, Batch, TaskData, TaskFamily};

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
fn solve(a: &Mat64, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|r| a.row(r).iter().copied().chain([b[r]]).collect())
        .collect();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))
            .unwrap();
        m.swap(c, p);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            let pivot = m[c].clone();
            for (dst, src) in m[r][c..].iter_mut().zip(&pivot[c..]) {
                *dst -= f * src;
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r][k] * x[k]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn quadratic_and_bowl_minimizers(seed in 0u64..100_000, dims in 1usize..6, px in prop::collection::vec(-3.0f64..3.0, 6)) {
        let q = generate_task(TaskFamily::Quadratic, seed, dims).unwrap();
        let TaskData::Quadratic { a, b } = &q.data else { unreachable!() };
        prop_assert!(q.full_loss(&px[..dims]).unwrap() >= 0.0);
        let x = solve(a, b);
        // a well-conditioned system is needed for the 1e-10 bound to be meaningful
        prop_assume!(x.iter().all(|v| v.abs() < 1e3));
        prop_assert!(norm2(&q.grad(&x, &Batch::Full).unwrap()) < 1e-10);

        let bowl = generate_task(TaskFamily::Bowl, seed, dims).unwrap();
        prop_assert!(bowl.full_loss(&px[..dims]).unwrap() >= 0.0);
        prop_assert_eq!(norm2(&bowl.grad(&vec![0.0; dims], &Batch::Full).unwrap()), 0.0);
    }

    #[test]
    fn tasks_are_pure_functions(family in 0usize..5, seed in any::<u64>()) {
        let f = TaskFamily::ALL[family];
        let dims = f.natural_dims().unwrap_or(3);
        prop_assert_eq!(generate_task(f, seed, dims).unwrap(), generate_task(f, seed, dims).unwrap());
    }

    #[test]
    fn optimizer_step_is_deterministic(seed in any::<u64>(), dims in 1usize..8, hidden in 1usize..6) {
        let mut w = init_params(seed, hidden).unwrap();
        let mut rng = RngStream::new(seed);
        w.out_w.iter_mut().for_each(|v| *v = rng.normal());
        let g = rng.normals(dims);
        let state = OptimizerState::new(dims, hidden);
        let (d1, s1) = optimizer_step(&w, &state, &g).unwrap();
        let (d2, s2) = optimizer_step(&w, &state, &g).unwrap();
        prop_assert_eq!(d1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), d2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(s1, s2);
    }

    #[test]
    fn flat_and_checkpoint_round_trips(seed in any::<u64>(), hidden in 1usize..10) {
        let mut w = init_params(seed, hidden).unwrap();
        w.out_b = 0.25;
        let flat = w.flatten();
        prop_assert_eq!(flat.len(), OptimizerParams::flat_len(hidden));
        prop_assert_eq!(&OptimizerParams::unflatten(hidden, &flat).unwrap(), &w);
        prop_assert_eq!(decode_checkpoint(&encode_checkpoint(&w)).unwrap(), w);
    }

    #[test]
    fn features_are_clamped(g in prop::collection::vec(-1e12f64..1e12, 1..10), r in prop::collection::vec(0.0f64..1e12, 10)) {
        let f = preprocess_gradient(&g, &r[..g.len()], 1e-8).unwrap();
        prop_assert!(f.iter().all(|v| v.abs() <= FEATURE_CLAMP));
    }
}
