//! Shared fixtures and oracles for the integration tests.
#![allow(dead_code)]

use macc_core::learned_optimizer::{init_params, optimizer_step, OptimizerParams, OptimizerState};
use macc_core::meta_engine::{task_stream, unroll, MetaConfig};
use macc_core::numcore::{dot, finite_diff_grad, grad_check, RngStream, Vec64};
use macc_core::parallel_exec::WorkerPool;
use macc_core::tasks::{generate_task, Task, TaskFamily};

/// Gradient-oracle tolerance and finite-difference step.
pub const ORACLE_REL_TOL: f64 = 1e-4;
pub const ORACLE_FD_STEP: f64 = 1e-4;
/// Both sides of an identically-zero coordinate must be below this.
pub const ORACLE_ZERO_TOL: f64 = 1e-10;

/// Optimizer with every block non-zero, so all meta-gradient paths are live.
pub fn live_params(seed: u64, hidden: usize) -> OptimizerParams {
    let mut w = init_params(seed, hidden).unwrap();
    let mut rng = RngStream::derive(seed, &[0x6c69_7665]);
    let mut flat = w.flatten();
    for v in &mut flat {
        *v = rng.uniform_range(-0.8, 0.8);
    }
    w = OptimizerParams::unflatten(hidden, &flat).unwrap();
    for v in &mut w.out_w {
        *v = rng.uniform_range(-0.5, 0.5);
    }
    w.out_b = rng.uniform_range(-0.05, 0.05);
    w.log_step = 0.1f64.ln();
    w
}

/// Small dims for families whose size is free; fixed size otherwise.
pub fn tiny_dims(family: TaskFamily, rng: &mut RngStream) -> usize {
    family
        .natural_dims()
        .unwrap_or(2 + (rng.next_u64() % 3) as usize)
}

/// Stop-gradient meta-loss replayed from frozen gradients: the optimizer is
/// re-run forward on `grads`, and every step contributes `g_t · θ_t(w)`.
/// Its gradient with respect to `w` is what the meta-backward pass returns.
/// The `w`-independent term `Σ_t g_t · θ_0` is dropped: it does not change
/// the gradient, only the cancellation error of the differences.
pub fn frozen_meta_loss(flat: &[f64], hidden: usize, dims: usize, grads: &[Vec64]) -> f64 {
    let w = OptimizerParams::unflatten(hidden, flat).unwrap();
    let mut state = OptimizerState::new(dims, hidden);
    let mut theta = vec![0.0; dims];
    let mut total = 0.0;
    for g in grads {
        total += dot(g, &theta);
        let (delta, next) = optimizer_step(&w, &state, g).unwrap();
        state = next;
        for (t, d) in theta.iter_mut().zip(&delta) {
            *t += d;
        }
    }
    total
}

pub struct OracleCase {
    pub family: TaskFamily,
    pub dims: usize,
    pub hidden: usize,
    pub unroll: usize,
    pub max_rel_err: f64,
    /// Largest magnitude, on either side, over identically-zero coordinates.
    pub max_zero_abs: f64,
    pub analytic: Vec64,
    pub numeric: Vec64,
}

impl OracleCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= ORACLE_REL_TOL && self.max_zero_abs <= ORACLE_ZERO_TOL
    }
}

/// Coordinates whose meta-gradient is zero by an exact identity. For
/// two-class softmax regression the per-class gradient rows are negatives
/// of each other, so every frozen gradient sums to zero and a uniform shift
/// of the update (`out_b`) cannot change the meta-loss. Relative error is
/// meaningless there; both sides are checked against an absolute bound.
pub fn identity_zero_coords(family: TaskFamily, hidden: usize) -> Vec<usize> {
    match family {
        TaskFamily::SoftmaxRegression => vec![OptimizerParams::layout(hidden).out_b],
        _ => Vec::new(),
    }
}

/// Runs one random tiny instance: records a tape on a real task, then
/// compares the analytic meta-gradient with central differences of the
/// frozen-gradient replay.
pub fn oracle_case(family: TaskFamily, seed: u64) -> OracleCase {
    oracle_case_with_step(family, seed, ORACLE_FD_STEP)
}

pub fn oracle_case_with_step(family: TaskFamily, seed: u64, step: f64) -> OracleCase {
    let mut rng = RngStream::derive(seed, &[0x6f72_6163]);
    let dims = tiny_dims(family, &mut rng);
    let hidden = 1 + (rng.next_u64() % 4) as usize;
    let unroll_steps = 2 + (rng.next_u64() % 4) as usize;
    let task: Task = generate_task(family, seed, dims).unwrap();
    let cfg = MetaConfig {
        unroll_steps,
        batch_size: 16,
        ..MetaConfig::default()
    };
    let w = live_params(seed, hidden);
    let (tape, _) = unroll(
        &task,
        &w,
        &cfg,
        &task_stream(seed, 0, 0),
        &WorkerPool::sequential(),
    )
    .unwrap();
    let analytic = macc_core::learned_optimizer::meta_backward(&w, &tape).unwrap();
    let grads: Vec<Vec64> = tape.steps.iter().map(|s| s.grad.clone()).collect();
    let numeric = finite_diff_grad(
        |flat| frozen_meta_loss(flat, hidden, dims, &grads),
        &w.flatten(),
        step,
    )
    .unwrap();
    let zeros = identity_zero_coords(family, hidden);
    let keep = |v: &[f64]| -> Vec64 {
        v.iter()
            .enumerate()
            .filter(|(i, _)| !zeros.contains(i))
            .map(|(_, x)| *x)
            .collect()
    };
    let check = grad_check(&keep(&analytic), &keep(&numeric), ORACLE_REL_TOL).unwrap();
    let max_zero_abs = zeros
        .iter()
        .map(|&i| analytic[i].abs().max(numeric[i].abs()))
        .fold(0.0, f64::max);
    OracleCase {
        family,
        dims,
        hidden,
        unroll: unroll_steps,
        max_rel_err: check.max_rel_err,
        max_zero_abs,
        analytic,
        numeric,
    }
}
