//! The task loop, the RMSProp meta loop, and the training pipelines built
//! from them.
//!
//! * `sequential`: every task in order, one meta update after each task.
//! * `sequential_averaged`: every task in order, one meta update per
//!   iteration with the averaged meta-gradient. Reference for the
//!   optimized pipeline's reduction semantics.
//! * `optimized`: cluster groups run concurrently; one update per iteration
//!   with the average of per-cluster meta-gradients.

use std::sync::OnceLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learned_optimizer::{
    meta_backward, step_recorded, OptimizerParams, OptimizerState, UnrollTape, DEFAULT_HIDDEN,
};
use crate::numcore::{ensure_finite, RngStream, Vec64};
use crate::parallel_exec::{
    parallel_batch_grads, parallel_cluster_step, ClusterExecutor, RunningMean, WorkerPool,
};
use crate::registry::Registry;
use crate::scheduler::{cluster_tasks, estimate_cost, grouping_strategies, CostModel, Workload};
use crate::tasks::{batches, Task};

/// Losses above this abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e10;

const STREAM_TRAIN: u64 = 0x0074_7261_696e;
const STREAM_EVAL: u64 = 0x6576_616c;
const STREAM_PROBE: u64 = 0x0070_726f_6265;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// Task-loop steps per task (the unroll length).
    pub unroll_steps: usize,
    pub batch_size: usize,
    /// Batches whose gradients are averaged at each unroll step.
    pub batches_per_step: usize,
    pub meta_iterations: usize,
    pub meta_lr: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    /// Workers for batch gradients; `None` uses the host's threads.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_parallel_degree: Option<usize>,
    pub k_clusters: usize,
    pub g_groups: usize,
    pub seed: u64,
    pub hidden: usize,
    pub cluster_strategy: String,
    pub grouping: String,
    pub cost_model: CostModel,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            unroll_steps: 20,
            batch_size: 32,
            batches_per_step: 2,
            meta_iterations: 20,
            meta_lr: 1e-3,
            rmsprop_decay: 0.9,
            rmsprop_eps: 1e-8,
            batch_parallel_degree: None,
            k_clusters: 1,
            g_groups: 1,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            cluster_strategy: "by_family".into(),
            grouping: "lpt".into(),
            cost_model: CostModel::Analytic,
        }
    }
}

impl MetaConfig {
    pub const FIELDS: &'static [&'static str] = &[
        "unroll_steps",
        "batch_size",
        "batches_per_step",
        "meta_iterations",
        "meta_lr",
        "rmsprop_decay",
        "rmsprop_eps",
        "batch_parallel_degree",
        "k_clusters",
        "g_groups",
        "seed",
        "hidden",
        "cluster_strategy",
        "grouping",
        "cost_model",
    ];

    /// Every violated constraint, in field order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let counts = [
            ("unroll_steps", self.unroll_steps),
            ("batch_size", self.batch_size),
            ("batches_per_step", self.batches_per_step),
            ("k_clusters", self.k_clusters),
            ("g_groups", self.g_groups),
            ("hidden", self.hidden),
        ];
        for (name, value) in counts {
            if value == 0 {
                v.push(format!("{name} must be at least 1"));
            }
        }
        if self.batch_parallel_degree == Some(0) {
            v.push("batch_parallel_degree must be at least 1 when set".into());
        }
        if !(self.meta_lr > 0.0 && self.meta_lr.is_finite()) {
            v.push(format!("meta_lr must be positive, got {}", self.meta_lr));
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            v.push(format!(
                "rmsprop_decay must be in (0, 1), got {}",
                self.rmsprop_decay
            ));
        }
        if !(self.rmsprop_eps >= 0.0 && self.rmsprop_eps.is_finite()) {
            v.push(format!(
                "rmsprop_eps must be non-negative, got {}",
                self.rmsprop_eps
            ));
        }
        if self.g_groups > self.k_clusters {
            v.push(format!(
                "g_groups ({}) must not exceed k_clusters ({})",
                self.g_groups, self.k_clusters
            ));
        }
        if !crate::scheduler::cluster_strategies().contains(&self.cluster_strategy) {
            v.push(format!(
                "unknown cluster_strategy `{}` (known: {})",
                self.cluster_strategy,
                crate::scheduler::cluster_strategies().names().join(", ")
            ));
        }
        if !grouping_strategies().contains(&self.grouping) {
            v.push(format!(
                "unknown grouping `{}` (known: {})",
                self.grouping,
                grouping_strategies().names().join(", ")
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Random stream for `task`'s loop in meta iteration `iteration`. Both
/// pipelines use it, so a task sees the same batches in either.
pub fn task_stream(seed: u64, iteration: usize, task_id: usize) -> RngStream {
    RngStream::derive(seed, &[STREAM_TRAIN, iteration as u64, task_id as u64])
}

pub fn eval_stream(seed: u64, task_id: usize) -> RngStream {
    RngStream::derive(seed, &[STREAM_EVAL, task_id as u64])
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskLoopResult {
    pub task_id: usize,
    /// Sum of `loss_trace`.
    pub meta_loss: f64,
    pub meta_grad: Vec64,
    /// Loss at the point each step's gradient was taken.
    pub loss_trace: Vec64,
    pub final_params: Vec64,
}

/// Unrolls the learned optimizer on one task and records the tape.
pub fn unroll(
    task: &Task,
    w: &OptimizerParams,
    cfg: &MetaConfig,
    stream: &RngStream,
    pool: &WorkerPool,
) -> Result<(UnrollTape, Vec64)> {
    let hidden = w.hidden();
    let mut state = OptimizerState::new(task.dims, hidden);
    let mut tape = UnrollTape::new(task.dims, hidden);
    let mut params = task.init_params.clone();
    for step in 0..cfg.unroll_steps {
        let mut rng = stream.substream(&[step as u64]);
        let bs = batches(task, &mut rng, cfg.batch_size, cfg.batches_per_step)?;
        let avg = parallel_batch_grads(task, &params, &bs, pool).map_err(|e| match e {
            Error::WorkItem { .. } => Error::Divergence {
                task: task.id,
                step,
                loss: f64::NAN,
            },
            other => other.context(format!("task {} step {step}", task.id)),
        })?;
        if !avg.loss.is_finite() || avg.loss > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                task: task.id,
                step,
                loss: avg.loss,
            });
        }
        let mut rec = step_recorded(w, &mut state, &avg.grad)
            .map_err(|e| e.context(format!("task {} step {step}", task.id)))?;
        rec.loss = avg.loss;
        for (p, d) in params.iter_mut().zip(&rec.delta) {
            *p += d;
        }
        tape.steps.push(rec);
    }
    if ensure_finite(&params).is_err() {
        return Err(Error::Divergence {
            task: task.id,
            step: cfg.unroll_steps,
            loss: f64::NAN,
        });
    }
    Ok((tape, params))
}

/// Runs `unroll_steps` steps of the task loop under frozen `w` and returns
/// the accumulated meta-loss with its meta-gradient.
pub fn task_loop(
    task: &Task,
    w: &OptimizerParams,
    cfg: &MetaConfig,
    stream: &RngStream,
    pool: &WorkerPool,
) -> Result<TaskLoopResult> {
    let (tape, final_params) = unroll(task, w, cfg, stream, pool)?;
    let meta_grad = meta_backward(w, &tape).map_err(|e| e.context(format!("task {}", task.id)))?;
    let loss_trace: Vec64 = tape.steps.iter().map(|s| s.loss).collect();
    Ok(TaskLoopResult {
        task_id: task.id,
        meta_loss: loss_trace.iter().sum(),
        meta_grad,
        loss_trace,
        final_params,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmspropState {
    pub v: Vec64,
}

impl RmspropState {
    pub fn new(len: usize) -> Self {
        Self { v: vec![0.0; len] }
    }
}

/// `v ← ρv + (1−ρ)g²`, `w ← w − lr·g/(√v + ε)` on the flat parameters.
pub fn meta_update_rmsprop(
    w: &OptimizerParams,
    rs: &RmspropState,
    meta_grad: &[f64],
    cfg: &MetaConfig,
) -> Result<(OptimizerParams, RmspropState)> {
    let mut flat = w.flatten();
    crate::numcore::check_len(flat.len(), meta_grad.len())?;
    crate::numcore::check_len(flat.len(), rs.v.len())?;
    ensure_finite(meta_grad).map_err(|e| Error::Numeric(format!("meta-gradient: {e}")))?;
    let rho = cfg.rmsprop_decay;
    let mut v = rs.v.clone();
    for ((p, vi), g) in flat.iter_mut().zip(v.iter_mut()).zip(meta_grad) {
        *vi = rho * *vi + (1.0 - rho) * g * g;
        if *g != 0.0 {
            *p -= cfg.meta_lr * g / (vi.sqrt() + cfg.rmsprop_eps);
        }
    }
    Ok((
        OptimizerParams::unflatten(w.hidden(), &flat)?,
        RmspropState { v },
    ))
}

/// Per-cluster mean meta-loss for one meta iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cluster_losses: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub pipeline: &'static str,
    pub params: OptimizerParams,
    pub iterations: Vec<IterationRecord>,
    pub meta_updates: usize,
    /// Training wall time (both loops), seconds.
    pub wall_time_s: f64,
    /// Accumulated wall time per cluster group (optimized pipeline only).
    pub group_times_s: Vec<f64>,
}

/// A complete meta-training procedure.
pub trait Pipeline: Send + Sync {
    fn name(&self) -> &'static str;
    fn train(
        &self,
        workload: &Workload,
        w0: &OptimizerParams,
        cfg: &MetaConfig,
    ) -> Result<TrainOutcome>;
}

fn cluster_losses(workload: &Workload, task_losses: &[(usize, f64)]) -> Vec<(usize, f64)> {
    workload
        .clusters
        .iter()
        .map(|c| {
            let ls: Vec<f64> = task_losses
                .iter()
                .filter(|(t, _)| c.task_ids.contains(t))
                .map(|(_, l)| *l)
                .collect();
            (c.id, ls.iter().sum::<f64>() / ls.len().max(1) as f64)
        })
        .collect()
}

/// Baseline: tasks in order, meta update after each task, no concurrency.
pub struct Sequential;

impl Pipeline for Sequential {
    fn name(&self) -> &'static str {
        "sequential"
    }

    fn train(
        &self,
        workload: &Workload,
        w0: &OptimizerParams,
        cfg: &MetaConfig,
    ) -> Result<TrainOutcome> {
        let pool = WorkerPool::sequential();
        let started = Instant::now();
        let mut w = w0.clone();
        let mut rs = RmspropState::new(w.flatten().len());
        let mut iterations = Vec::with_capacity(cfg.meta_iterations);
        let mut updates = 0;
        for it in 0..cfg.meta_iterations {
            let mut task_losses = Vec::with_capacity(workload.tasks.len());
            for task in &workload.tasks {
                let res = task_loop(task, &w, cfg, &task_stream(cfg.seed, it, task.id), &pool)
                    .map_err(|e| e.context(format!("sequential iteration {it}")))?;
                (w, rs) = meta_update_rmsprop(&w, &rs, &res.meta_grad, cfg)?;
                updates += 1;
                task_losses.push((task.id, res.meta_loss));
            }
            iterations.push(IterationRecord {
                iteration: it,
                cluster_losses: cluster_losses(workload, &task_losses),
            });
        }
        Ok(TrainOutcome {
            pipeline: self.name(),
            params: w,
            iterations,
            meta_updates: updates,
            wall_time_s: started.elapsed().as_secs_f64(),
            group_times_s: Vec::new(),
        })
    }
}

/// Tasks in order with one averaged meta update per iteration.
pub struct SequentialAveraged;

impl Pipeline for SequentialAveraged {
    fn name(&self) -> &'static str {
        "sequential_averaged"
    }

    fn train(
        &self,
        workload: &Workload,
        w0: &OptimizerParams,
        cfg: &MetaConfig,
    ) -> Result<TrainOutcome> {
        let pool = WorkerPool::sequential();
        let started = Instant::now();
        let mut w = w0.clone();
        let mut rs = RmspropState::new(w.flatten().len());
        let mut iterations = Vec::with_capacity(cfg.meta_iterations);
        for it in 0..cfg.meta_iterations {
            let mut mean = RunningMean::new();
            let mut task_losses = Vec::with_capacity(workload.tasks.len());
            for task in &workload.tasks {
                let res = task_loop(task, &w, cfg, &task_stream(cfg.seed, it, task.id), &pool)
                    .map_err(|e| e.context(format!("sequential iteration {it}")))?;
                mean.push(&res.meta_grad)?;
                task_losses.push((task.id, res.meta_loss));
            }
            (w, rs) = meta_update_rmsprop(&w, &rs, &mean.finish()?, cfg)?;
            iterations.push(IterationRecord {
                iteration: it,
                cluster_losses: cluster_losses(workload, &task_losses),
            });
        }
        Ok(TrainOutcome {
            pipeline: self.name(),
            params: w,
            iterations,
            meta_updates: cfg.meta_iterations,
            wall_time_s: started.elapsed().as_secs_f64(),
            group_times_s: Vec::new(),
        })
    }
}

/// Cluster groups in parallel, one update per iteration from the average
/// of the cluster meta-gradients.
pub struct Optimized;

impl Pipeline for Optimized {
    fn name(&self) -> &'static str {
        "optimized"
    }

    fn train(
        &self,
        workload: &Workload,
        w0: &OptimizerParams,
        cfg: &MetaConfig,
    ) -> Result<TrainOutcome> {
        let exec = ClusterExecutor::for_schedule(&workload.schedule, cfg)?;
        let started = Instant::now();
        let mut w = w0.clone();
        let mut rs = RmspropState::new(w.flatten().len());
        let mut iterations = Vec::with_capacity(cfg.meta_iterations);
        let mut group_times_s = vec![0.0; workload.schedule.groups.len()];
        for it in 0..cfg.meta_iterations {
            let step = parallel_cluster_step(workload, &w, cfg, it, &exec)
                .map_err(|e| e.context(format!("optimized iteration {it}")))?;
            for (acc, t) in group_times_s.iter_mut().zip(&step.group_times_s) {
                *acc += t;
            }
            (w, rs) = meta_update_rmsprop(&w, &rs, &step.averaged, cfg)?;
            iterations.push(IterationRecord {
                iteration: it,
                cluster_losses: step
                    .clusters
                    .iter()
                    .map(|c| (c.cluster_id, c.meta_loss))
                    .collect(),
            });
        }
        Ok(TrainOutcome {
            pipeline: self.name(),
            params: w,
            iterations,
            meta_updates: cfg.meta_iterations,
            wall_time_s: started.elapsed().as_secs_f64(),
            group_times_s,
        })
    }
}

pub fn pipelines() -> &'static Registry<dyn Pipeline> {
    static REG: OnceLock<Registry<dyn Pipeline>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<dyn Pipeline> = Registry::new("pipeline");
        r.register(Sequential.name(), Box::new(Sequential));
        r.register(SequentialAveraged.name(), Box::new(SequentialAveraged));
        r.register(Optimized.name(), Box::new(Optimized));
        r
    })
}

/// Mean seconds per unroll step over a short timed loop on each task.
pub fn probe_step_time(tasks: &[&Task], w: &OptimizerParams, cfg: &MetaConfig) -> Result<f64> {
    let probe_cfg = MetaConfig {
        unroll_steps: cfg.unroll_steps.min(3),
        ..cfg.clone()
    };
    let pool = WorkerPool::sequential();
    let started = Instant::now();
    for task in tasks {
        task_loop(
            task,
            w,
            &probe_cfg,
            &RngStream::derive(cfg.seed, &[STREAM_PROBE, task.id as u64]),
            &pool,
        )?;
    }
    Ok(started.elapsed().as_secs_f64() / (tasks.len() * probe_cfg.unroll_steps).max(1) as f64)
}

/// Clusters the tasks and schedules the clusters onto groups as configured.
/// Task ids are reassigned to positions.
pub fn prepare_workload(
    tasks: Vec<Task>,
    w: &OptimizerParams,
    cfg: &MetaConfig,
) -> Result<Workload> {
    cfg.validate()?;
    let tasks: Vec<Task> = tasks
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.with_id(i))
        .collect();
    let mut clusters = cluster_tasks(&tasks, cfg.k_clusters, &cfg.cluster_strategy, cfg)?;
    if cfg.cost_model == CostModel::Probe {
        for c in &mut clusters {
            let members: Vec<&Task> = c.task_ids.iter().map(|&t| &tasks[t]).collect();
            let per_step = probe_step_time(&members, w, cfg)?;
            c.est_cost = estimate_cost(c, &tasks, cfg, Some(per_step.max(1e-12)));
        }
    }
    let schedule = grouping_strategies()
        .get(&cfg.grouping)?
        .group(&clusters, cfg.g_groups)?;
    Workload::new(tasks, clusters, schedule)
}

/// Baseline pipeline on `tasks` in the given order.
pub fn meta_train_sequential(
    tasks: Vec<Task>,
    w0: &OptimizerParams,
    cfg: &MetaConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let workload = Workload::single_cluster(renumber(tasks), cfg)?;
    Sequential.train(&workload, w0, cfg)
}

/// Baseline order with one averaged update per iteration.
pub fn meta_train_sequential_averaged(
    tasks: Vec<Task>,
    w0: &OptimizerParams,
    cfg: &MetaConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let workload = Workload::single_cluster(renumber(tasks), cfg)?;
    SequentialAveraged.train(&workload, w0, cfg)
}

/// Clusters, groups and trains with the parallel pipeline.
pub fn meta_train_optimized(
    tasks: Vec<Task>,
    w0: &OptimizerParams,
    cfg: &MetaConfig,
) -> Result<TrainOutcome> {
    let workload = prepare_workload(tasks, w0, cfg)?;
    Optimized.train(&workload, w0, cfg)
}

fn renumber(tasks: Vec<Task>) -> Vec<Task> {
    tasks
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.with_id(i))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub task_id: usize,
    pub family: crate::tasks::TaskFamily,
    pub seed: u64,
    /// Full-objective loss before and after the task loop.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_curve: Vec64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskEval>,
    pub mean_initial_loss: f64,
    pub mean_final_loss: f64,
    /// Mean over classification tasks, when there are any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_accuracy: Option<f64>,
}

/// Trains each test task with frozen `w` (no meta updates) and reports
/// full-objective losses and classification accuracy.
pub fn evaluate_optimizer(
    w: &OptimizerParams,
    test_tasks: &[Task],
    cfg: &MetaConfig,
) -> Result<EvalReport> {
    if test_tasks.is_empty() {
        return Err(Error::EmptyInput("no test tasks"));
    }
    let pool = WorkerPool::sequential();
    let mut evals = Vec::with_capacity(test_tasks.len());
    for task in test_tasks {
        let (tape, final_params) = unroll(task, w, cfg, &eval_stream(cfg.seed, task.id), &pool)
            .map_err(|e| e.context(format!("evaluating test task {}", task.id)))?;
        let accuracy = if task.family.has_dataset() {
            Some(task.accuracy(&final_params)?)
        } else {
            None
        };
        evals.push(TaskEval {
            task_id: task.id,
            family: task.family,
            seed: task.seed,
            initial_loss: task.full_loss(&task.init_params)?,
            final_loss: task.full_loss(&final_params)?,
            loss_curve: tape.steps.iter().map(|s| s.loss).collect(),
            accuracy,
        });
    }
    let n = evals.len() as f64;
    let accs: Vec<f64> = evals.iter().filter_map(|e| e.accuracy).collect();
    Ok(EvalReport {
        mean_initial_loss: evals.iter().map(|e| e.initial_loss).sum::<f64>() / n,
        mean_final_loss: evals.iter().map(|e| e.final_loss).sum::<f64>() / n,
        mean_accuracy: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
        tasks: evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learned_optimizer::init_params;
    use crate::tasks::{generate_task, TaskFamily};

    fn flat_params(n_hidden: usize) -> OptimizerParams {
        let mut w = init_params(1, n_hidden).unwrap();
        w.out_w = vec![0.0; n_hidden];
        w
    }

    #[test]
    fn rmsprop_zero_gradient() {
        let cfg = MetaConfig::default();
        let w = init_params(2, 3).unwrap();
        let len = w.flatten().len();
        let rs = RmspropState { v: vec![2.0; len] };
        let (w1, rs1) = meta_update_rmsprop(&w, &rs, &vec![0.0; len], &cfg).unwrap();
        assert_eq!(w1, w);
        assert!(rs1.v.iter().all(|&v| v == 0.9 * 2.0));
        let (w2, _) = meta_update_rmsprop(&w1, &rs1, &vec![0.0; len], &cfg).unwrap();
        assert_eq!(
            w2.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            w.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rmsprop_scalar_step() {
        // single coordinate: log_step of a hidden=1 parameter set
        let cfg = MetaConfig {
            meta_lr: 0.01,
            rmsprop_decay: 0.9,
            rmsprop_eps: 0.0,
            ..MetaConfig::default()
        };
        let w = init_params(2, 1).unwrap();
        let len = w.flatten().len();
        let mut g = vec![0.0; len];
        g[len - 1] = 3.0;
        let (w1, rs1) = meta_update_rmsprop(&w, &RmspropState::new(len), &g, &cfg).unwrap();
        assert!((rs1.v[len - 1] - 0.9).abs() < 1e-15);
        let step = w.log_step - w1.log_step;
        assert!((step - 0.031623).abs() < 1e-6, "{step}");
        assert!(meta_update_rmsprop(&w, &RmspropState::new(len), &g[1..], &cfg).is_err());
        g[0] = f64::NAN;
        assert!(meta_update_rmsprop(&w, &RmspropState::new(len), &g, &cfg).is_err());
    }

    #[test]
    fn fresh_optimizer_leaves_task_untouched() {
        let cfg = MetaConfig {
            unroll_steps: 6,
            ..MetaConfig::default()
        };
        let task = generate_task(TaskFamily::Quadratic, 3, 4).unwrap();
        let w = flat_params(4);
        let r = task_loop(
            &task,
            &w,
            &cfg,
            &task_stream(0, 0, 0),
            &WorkerPool::sequential(),
        )
        .unwrap();
        assert_eq!(r.final_params, task.init_params);
        assert!(r.loss_trace.iter().all(|&l| l == r.loss_trace[0]));
        assert_eq!(r.meta_loss, r.loss_trace.iter().sum::<f64>());
    }

    #[test]
    fn task_loop_deterministic_and_degree_independent() {
        let cfg = MetaConfig {
            unroll_steps: 5,
            batches_per_step: 4,
            batch_size: 16,
            ..MetaConfig::default()
        };
        let task =
            generate_task(TaskFamily::SoftmaxRegression, 2, crate::tasks::SOFTMAX_DIMS).unwrap();
        let mut w = init_params(4, 3).unwrap();
        w.out_w = vec![0.3, -0.2, 0.5];
        let stream = task_stream(1, 0, 0);
        let a = task_loop(&task, &w, &cfg, &stream, &WorkerPool::sequential()).unwrap();
        let b = task_loop(&task, &w, &cfg, &stream, &WorkerPool::sequential()).unwrap();
        let c = task_loop(&task, &w, &cfg, &stream, &WorkerPool::new(4).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn divergence_is_reported_with_task_and_step() {
        let cfg = MetaConfig {
            unroll_steps: 40,
            ..MetaConfig::default()
        };
        let task = generate_task(TaskFamily::Bowl, 1, 2).unwrap().with_id(7);
        let mut w = init_params(0, 2).unwrap();
        w.out_b = -1e12; // constant huge positive update
        let err = task_loop(
            &task,
            &w,
            &cfg,
            &task_stream(0, 0, 7),
            &WorkerPool::sequential(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { task: 7, .. }), "{err}");
    }

    #[test]
    fn config_violations_collected() {
        let cfg = MetaConfig {
            unroll_steps: 0,
            rmsprop_decay: 1.0,
            k_clusters: 2,
            g_groups: 3,
            grouping: "random".into(),
            ..MetaConfig::default()
        };
        let v = cfg.violations();
        assert_eq!(v.len(), 4, "{v:?}");
        assert!(MetaConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_iterations_return_initial_params() {
        let cfg = MetaConfig {
            meta_iterations: 0,
            ..MetaConfig::default()
        };
        let w = init_params(3, 4).unwrap();
        let tasks = vec![generate_task(TaskFamily::Bowl, 1, 3).unwrap()];
        let out = meta_train_sequential(tasks, &w, &cfg).unwrap();
        assert_eq!(out.params, w);
        assert_eq!(out.meta_updates, 0);
    }

    #[test]
    fn one_task_one_iteration_one_update() {
        let cfg = MetaConfig {
            meta_iterations: 1,
            unroll_steps: 4,
            ..MetaConfig::default()
        };
        let w = init_params(3, 4).unwrap();
        let tasks = vec![generate_task(TaskFamily::Bowl, 1, 3).unwrap()];
        let out = meta_train_sequential(tasks.clone(), &w, &cfg).unwrap();
        assert_eq!(out.meta_updates, 1);
        let r = task_loop(
            &tasks[0],
            &w,
            &cfg,
            &task_stream(cfg.seed, 0, 0),
            &WorkerPool::sequential(),
        )
        .unwrap();
        let (expected, _) = meta_update_rmsprop(
            &w,
            &RmspropState::new(w.flatten().len()),
            &r.meta_grad,
            &cfg,
        )
        .unwrap();
        assert_eq!(out.params, expected);
    }

    #[test]
    fn evaluation_with_fresh_optimizer_keeps_losses() {
        let cfg = MetaConfig {
            unroll_steps: 5,
            ..MetaConfig::default()
        };
        let tasks: Vec<Task> = (0..3)
            .map(|i| {
                generate_task(TaskFamily::Quadratic, 100 + i, 4)
                    .unwrap()
                    .with_id(i as usize)
            })
            .collect();
        let w = init_params(0, 4).unwrap();
        let rep = evaluate_optimizer(&w, &tasks, &cfg).unwrap();
        assert_eq!(rep.mean_final_loss, rep.mean_initial_loss);
        assert!(rep.mean_accuracy.is_none());
        assert_eq!(rep, evaluate_optimizer(&w, &tasks, &cfg).unwrap());
    }
}
