//! All concurrency lives here: batch-parallel gradient averaging inside the
//! task loop and concurrent execution of cluster groups.
//!
//! Results are always gathered by item index and folded in ascending index
//! order, so every output is bit-identical for any worker count.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::learned_optimizer::OptimizerParams;
use crate::meta_engine::{task_loop, task_stream, MetaConfig};
use crate::numcore::{check_len, ensure_finite, Vec64};
use crate::scheduler::{Schedule, Workload};
use crate::tasks::{Batch, Task};

/// Environment variable capping every worker pool.
pub const THREADS_ENV: &str = "MACC_THREADS";

/// Hardware threads available to this process, capped by `MACC_THREADS`.
pub fn host_threads() -> usize {
    let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        Some(cap) if cap >= 1 => hw.min(cap),
        _ => hw,
    }
}

/// Hardware threads without the environment cap.
pub fn hardware_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Resolves an optional requested degree against the host and the amount of
/// work: `None` means "as many as the host allows".
pub fn resolve_degree(requested: Option<usize>, work_items: usize) -> usize {
    let cap = match std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        Some(c) if c >= 1 => c,
        _ => usize::MAX,
    };
    let wanted = requested.unwrap_or_else(hardware_threads);
    wanted.min(cap).min(work_items.max(1)).max(1)
}

/// Fixed-size pool of workers. Degree 1 runs everything on the caller.
pub struct WorkerPool {
    degree: usize,
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for WorkerPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerPool")
            .field("degree", &self.degree)
            .finish()
    }
}

impl WorkerPool {
    pub fn new(degree: usize) -> Result<Self> {
        if degree == 0 {
            return Err(Error::config("worker degree must be at least 1"));
        }
        let pool = if degree == 1 {
            None
        } else {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(degree)
                    .thread_name(|i| format!("macc-worker-{i}"))
                    .build()
                    .map_err(|e| Error::Numeric(format!("failed to start worker pool: {e}")))?,
            )
        };
        Ok(Self { degree, pool })
    }

    pub fn sequential() -> Self {
        Self {
            degree: 1,
            pool: None,
        }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Runs `f` on every item; the returned vector is in item order no
    /// matter which worker finished first.
    pub fn run_indexed<T, R, F>(&self, items: &[T], f: F) -> Vec<Result<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> Result<R> + Sync + Send,
    {
        use rayon::prelude::*;
        match &self.pool {
            Some(pool) if items.len() > 1 => pool.install(|| {
                items
                    .par_iter()
                    .with_max_len(1)
                    .enumerate()
                    .map(|(i, item)| f(i, item))
                    .collect()
            }),
            _ => items
                .iter()
                .enumerate()
                .map(|(i, item)| f(i, item))
                .collect(),
        }
    }

    /// [`run_indexed`](Self::run_indexed), failing on the lowest-index error.
    /// The error reports how many items did complete.
    pub fn map_indexed<T, R, F>(&self, items: &[T], f: F) -> Result<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> Result<R> + Sync + Send,
    {
        collect_indexed(self.run_indexed(items, f))
    }
}

fn collect_indexed<R>(results: Vec<Result<R>>) -> Result<Vec<R>> {
    let completed = results.iter().filter(|r| r.is_ok()).count();
    let mut out = Vec::with_capacity(results.len());
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => out.push(v),
            Err(e) => {
                return Err(Error::WorkItem {
                    index,
                    completed,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(out)
}

/// Index-ordered running mean `m ← m + (x − m)/i`.
///
/// Identical inputs leave the mean bit-exactly unchanged, which a
/// sum-then-divide fold does not guarantee.
#[derive(Debug, Clone)]
pub struct RunningMean {
    mean: Vec64,
    count: usize,
}

impl RunningMean {
    pub fn new() -> Self {
        Self {
            mean: Vec::new(),
            count: 0,
        }
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if self.count == 0 {
            self.mean = x.to_vec();
        } else {
            check_len(self.mean.len(), x.len())?;
            let n = (self.count + 1) as f64;
            for (m, xi) in self.mean.iter_mut().zip(x) {
                *m += (xi - *m) / n;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self) -> Result<Vec64> {
        if self.count == 0 {
            Err(Error::EmptyInput("mean of zero items"))
        } else {
            Ok(self.mean)
        }
    }
}

impl Default for RunningMean {
    fn default() -> Self {
        Self::new()
    }
}

/// Mean of equally sized vectors, folded in ascending index order.
pub fn deterministic_mean<V: AsRef<[f64]>>(items: &[V]) -> Result<Vec64> {
    let mut acc = RunningMean::new();
    for item in items {
        acc.push(item.as_ref())?;
    }
    acc.finish()
}

/// Averaged loss and gradient over a set of batches.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchAverage {
    pub loss: f64,
    pub grad: Vec64,
}

/// Per-batch loss and gradient computed concurrently, averaged in batch
/// order.
pub fn parallel_batch_grads(
    task: &Task,
    params: &[f64],
    batches: &[Batch],
    pool: &WorkerPool,
) -> Result<BatchAverage> {
    if batches.is_empty() {
        return Err(Error::EmptyInput("no batches to average"));
    }
    let per_batch = pool.map_indexed(batches, |_, batch| {
        let (loss, grad) = task.loss_grad(params, batch)?;
        ensure_finite(&grad)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite batch loss {loss}")));
        }
        Ok((loss, grad))
    })?;
    let mut loss = RunningMean::new();
    let mut grad = RunningMean::new();
    for (l, g) in &per_batch {
        loss.push(&[*l])?;
        grad.push(g)?;
    }
    Ok(BatchAverage {
        loss: loss.finish()?[0],
        grad: grad.finish()?,
    })
}

/// What one cluster contributed to a meta iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOutcome {
    pub cluster_id: usize,
    pub meta_grad: Vec64,
    /// Mean of the member tasks' meta-losses.
    pub meta_loss: f64,
    pub task_meta_losses: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct ClusterStepResult {
    /// Ascending cluster id.
    pub clusters: Vec<ClusterOutcome>,
    pub averaged: Vec64,
    /// Wall time of each group, by position in the schedule.
    pub group_times_s: Vec<f64>,
}

/// Pools reused across meta iterations: one worker per cluster group, and
/// a batch pool per group for the task loops it runs.
#[derive(Debug)]
pub struct ClusterExecutor {
    group_pool: WorkerPool,
    batch_pools: Vec<WorkerPool>,
}

impl ClusterExecutor {
    pub fn new(group_degree: usize, groups: usize, batch_degree: usize) -> Result<Self> {
        Ok(Self {
            group_pool: WorkerPool::new(group_degree)?,
            batch_pools: (0..groups.max(1))
                .map(|_| WorkerPool::new(batch_degree))
                .collect::<Result<_>>()?,
        })
    }

    /// Degrees resolved from the config and the schedule.
    pub fn for_schedule(schedule: &Schedule, cfg: &MetaConfig) -> Result<Self> {
        let groups = schedule.groups.len();
        let group_degree = resolve_degree(None, groups);
        let batch_degree = resolve_degree(cfg.batch_parallel_degree, cfg.batches_per_step);
        Self::new(group_degree, groups, batch_degree)
    }

    pub fn group_degree(&self) -> usize {
        self.group_pool.degree()
    }
}

/// Runs every cluster group concurrently under frozen `w`; within a group,
/// clusters and their tasks run in order. Per-task meta-gradients are
/// averaged per cluster, then across clusters in ascending cluster id.
pub fn parallel_cluster_step(
    workload: &Workload,
    w: &OptimizerParams,
    cfg: &MetaConfig,
    iteration: usize,
    exec: &ClusterExecutor,
) -> Result<ClusterStepResult> {
    let schedule = &workload.schedule;
    if exec.batch_pools.len() < schedule.groups.len() {
        return Err(Error::Consistency(format!(
            "executor sized for {} groups, schedule has {}",
            exec.batch_pools.len(),
            schedule.groups.len()
        )));
    }
    let per_group = exec.group_pool.run_indexed(&schedule.groups, |gi, group| {
        let started = Instant::now();
        let pool = &exec.batch_pools[gi];
        let mut outcomes = Vec::with_capacity(group.cluster_ids.len());
        for &cid in &group.cluster_ids {
            let cluster = workload.cluster(cid)?;
            let mut grad = RunningMean::new();
            let mut task_losses = Vec::with_capacity(cluster.task_ids.len());
            for &tid in &cluster.task_ids {
                let task = workload.task(tid)?;
                let stream = task_stream(cfg.seed, iteration, task.id);
                let res =
                    task_loop(task, w, cfg, &stream, pool).map_err(|e| Error::ClusterTask {
                        group: group.group_id,
                        cluster: cid,
                        task: task.id,
                        source: Box::new(e),
                    })?;
                grad.push(&res.meta_grad)?;
                task_losses.push((task.id, res.meta_loss));
            }
            let meta_loss =
                task_losses.iter().map(|(_, l)| l).sum::<f64>() / task_losses.len() as f64;
            outcomes.push(ClusterOutcome {
                cluster_id: cid,
                meta_grad: grad.finish()?,
                meta_loss,
                task_meta_losses: task_losses,
            });
        }
        Ok((outcomes, started.elapsed().as_secs_f64()))
    });

    let mut clusters = Vec::new();
    let mut group_times_s = Vec::with_capacity(per_group.len());
    for r in per_group {
        // cluster-task errors already carry (group, cluster, task)
        let (outcomes, secs) = r?;
        clusters.extend(outcomes);
        group_times_s.push(secs);
    }
    clusters.sort_by_key(|c| c.cluster_id);
    let averaged = deterministic_mean(
        &clusters
            .iter()
            .map(|c| c.meta_grad.as_slice())
            .collect::<Vec<_>>(),
    )?;
    Ok(ClusterStepResult {
        clusters,
        averaged,
        group_times_s,
    })
}
