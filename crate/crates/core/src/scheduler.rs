//! Task clustering and balanced assignment of clusters to parallel groups.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta_engine::MetaConfig;
use crate::numcore::{norm2, RngStream};
use crate::registry::Registry;
use crate::tasks::{Batch, Task, TaskFamily};

/// Exhaustive grouping is limited to this many clusters.
pub const MAX_BRUTEFORCE_CLUSTERS: usize = 12;
pub const KMEANS_ITERATIONS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    /// Positions of member tasks in the workload, ascending.
    pub task_ids: Vec<usize>,
    /// `None` when the members span several families.
    pub family_label: Option<TaskFamily>,
    pub est_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterGroup {
    pub group_id: usize,
    pub cluster_ids: Vec<usize>,
    pub total_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub strategy: String,
    pub groups: Vec<ClusterGroup>,
    pub makespan: f64,
}

impl Schedule {
    fn from_assignment(
        strategy: &str,
        clusters: &[Cluster],
        assignment: &[usize],
        groups: usize,
    ) -> Self {
        let mut out: Vec<ClusterGroup> = (0..groups)
            .map(|g| ClusterGroup {
                group_id: g,
                cluster_ids: Vec::new(),
                total_cost: 0.0,
            })
            .collect();
        for (c, &g) in clusters.iter().zip(assignment) {
            out[g].cluster_ids.push(c.id);
            out[g].total_cost += c.est_cost;
        }
        let makespan = out.iter().map(|g| g.total_cost).fold(0.0, f64::max);
        Self {
            strategy: strategy.to_string(),
            groups: out,
            makespan,
        }
    }

    /// Every cluster id appears in exactly one group.
    pub fn is_partition_of(&self, clusters: &[Cluster]) -> bool {
        let mut seen: Vec<usize> = self
            .groups
            .iter()
            .flat_map(|g| g.cluster_ids.iter().copied())
            .collect();
        seen.sort_unstable();
        let mut ids: Vec<usize> = clusters.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        seen == ids
    }
}

/// How cluster costs are estimated before grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostModel {
    /// `Σ_tasks unroll_steps × dims × family factor`
    #[default]
    Analytic,
    /// Short timed task loops per cluster.
    Probe,
}

/// Estimated cost of a cluster. With a probe (seconds per unroll step) the
/// estimate is `probe × unroll_steps × task count`.
pub fn estimate_cost(
    cluster: &Cluster,
    tasks: &[Task],
    cfg: &MetaConfig,
    probe: Option<f64>,
) -> f64 {
    let steps = cfg.unroll_steps as f64;
    match probe {
        Some(per_step) => per_step * steps * cluster.task_ids.len() as f64,
        None => cluster
            .task_ids
            .iter()
            .map(|&t| steps * tasks[t].dims as f64 * tasks[t].family.cost_factor())
            .sum(),
    }
}

/// Assigns tasks to clusters. Returns member positions per cluster.
pub trait ClusterStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn assign(&self, tasks: &[Task], k: usize, seed: u64) -> Result<Vec<Vec<usize>>>;
}

/// One cluster per task family present; `k = 1` puts everything in one.
pub struct ByFamily;

impl ClusterStrategy for ByFamily {
    fn name(&self) -> &'static str {
        "by_family"
    }

    fn assign(&self, tasks: &[Task], k: usize, _seed: u64) -> Result<Vec<Vec<usize>>> {
        let groups: Vec<Vec<usize>> = TaskFamily::ALL
            .iter()
            .map(|&f| {
                (0..tasks.len())
                    .filter(|&i| tasks[i].family == f)
                    .collect::<Vec<_>>()
            })
            .filter(|g| !g.is_empty())
            .collect();
        if k == 1 {
            return Ok(vec![(0..tasks.len()).collect()]);
        }
        if groups.len() != k {
            return Err(Error::config(format!(
                "by_family clustering needs k = {} (distinct families present), got k = {k}",
                groups.len()
            )));
        }
        Ok(groups)
    }
}

/// Lloyd's k-means over per-task feature vectors.
pub struct KMeansFeatures;

/// `[ln(1+dims), one-hot family, ln(1+initial loss), ln(1+initial grad norm)]`
pub fn task_features(task: &Task) -> Result<Vec<f64>> {
    let (loss, grad) = task.loss_grad(&task.init_params, &Batch::Full)?;
    let mut f = Vec::with_capacity(3 + TaskFamily::ALL.len());
    f.push((task.dims as f64).ln_1p());
    f.extend(
        TaskFamily::ALL
            .iter()
            .map(|&fam| if fam == task.family { 1.0 } else { 0.0 }),
    );
    f.push(loss.abs().ln_1p());
    f.push(norm2(&grad).ln_1p());
    Ok(f)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl ClusterStrategy for KMeansFeatures {
    fn name(&self) -> &'static str {
        "kmeans"
    }

    fn assign(&self, tasks: &[Task], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        let n = tasks.len();
        let points: Vec<Vec<f64>> = tasks.iter().map(task_features).collect::<Result<_>>()?;
        let mut rng = RngStream::derive(seed, &[0x6b6d_6561_6e73]);
        let mut centroids: Vec<Vec<f64>> = rng.permutation(n)[..k]
            .iter()
            .map(|&i| points[i].clone())
            .collect();
        let mut labels = vec![0usize; n];

        for _ in 0..KMEANS_ITERATIONS {
            for (i, p) in points.iter().enumerate() {
                let mut best = 0;
                for c in 1..k {
                    if sq_dist(p, &centroids[c]) < sq_dist(p, &centroids[best]) {
                        best = c;
                    }
                }
                labels[i] = best;
            }
            repair_empty(&points, &centroids, &mut labels, k);
            for (c, centroid) in centroids.iter_mut().enumerate() {
                let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
                for (d, v) in centroid.iter_mut().enumerate() {
                    *v = members.iter().map(|&i| points[i][d]).sum::<f64>() / members.len() as f64;
                }
            }
        }

        let mut groups: Vec<Vec<usize>> = (0..k)
            .map(|c| (0..n).filter(|&i| labels[i] == c).collect())
            .collect();
        groups.sort_by_key(|g| g[0]);
        Ok(groups)
    }
}

/// Moves the point farthest from its centroid (taken from a cluster with
/// more than one member) into each empty cluster.
fn repair_empty(points: &[Vec<f64>], centroids: &[Vec<f64>], labels: &mut [usize], k: usize) {
    for c in 0..k {
        if labels.contains(&c) {
            continue;
        }
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let donor = (0..points.len()).filter(|&i| sizes[labels[i]] > 1).fold(
            None::<(usize, f64)>,
            |best, i| {
                let d = sq_dist(&points[i], &centroids[labels[i]]);
                match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                }
            },
        );
        if let Some((i, _)) = donor {
            labels[i] = c;
        }
    }
}

pub fn cluster_strategies() -> &'static Registry<dyn ClusterStrategy> {
    static REG: OnceLock<Registry<dyn ClusterStrategy>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<dyn ClusterStrategy> = Registry::new("cluster strategy");
        r.register(ByFamily.name(), Box::new(ByFamily));
        r.register(KMeansFeatures.name(), Box::new(KMeansFeatures));
        r
    })
}

/// Clusters `tasks` into `k` clusters with analytic cost estimates. Cluster
/// ids follow the position of each cluster's first member.
pub fn cluster_tasks(
    tasks: &[Task],
    k: usize,
    strategy: &str,
    cfg: &MetaConfig,
) -> Result<Vec<Cluster>> {
    if k == 0 || k > tasks.len() {
        return Err(Error::config(format!(
            "k_clusters must be in 1..={} (task count), got {k}",
            tasks.len()
        )));
    }
    let groups = cluster_strategies()
        .get(strategy)?
        .assign(tasks, k, cfg.seed)?;
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(id, task_ids)| {
            let first = tasks[task_ids[0]].family;
            let family_label = task_ids
                .iter()
                .all(|&t| tasks[t].family == first)
                .then_some(first);
            let mut c = Cluster {
                id,
                task_ids,
                family_label,
                est_cost: 0.0,
            };
            c.est_cost = estimate_cost(&c, tasks, cfg, None);
            c
        })
        .collect())
}

/// Partitions clusters into a fixed number of groups.
pub trait GroupingStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn group(&self, clusters: &[Cluster], groups: usize) -> Result<Schedule>;
}

fn check_group_count(clusters: &[Cluster], groups: usize) -> Result<()> {
    if groups == 0 || groups > clusters.len() {
        return Err(Error::config(format!(
            "g_groups must be in 1..={} (cluster count), got {groups}",
            clusters.len()
        )));
    }
    Ok(())
}

/// Longest-processing-time greedy.
pub struct Lpt;

impl GroupingStrategy for Lpt {
    fn name(&self) -> &'static str {
        "lpt"
    }

    fn group(&self, clusters: &[Cluster], groups: usize) -> Result<Schedule> {
        group_clusters_lpt(clusters, groups)
    }
}

/// Minimum-makespan partition by exhaustive search.
pub struct Exhaustive;

impl GroupingStrategy for Exhaustive {
    fn name(&self) -> &'static str {
        "optimal"
    }

    fn group(&self, clusters: &[Cluster], groups: usize) -> Result<Schedule> {
        optimal_grouping_bruteforce(clusters, groups)
    }
}

pub fn grouping_strategies() -> &'static Registry<dyn GroupingStrategy> {
    static REG: OnceLock<Registry<dyn GroupingStrategy>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<dyn GroupingStrategy> = Registry::new("grouping strategy");
        r.register(Lpt.name(), Box::new(Lpt));
        r.register(Exhaustive.name(), Box::new(Exhaustive));
        r
    })
}

/// Sort by cost descending (ties: lower id first) and give each cluster to
/// the least-loaded group (ties: lower group id).
pub fn group_clusters_lpt(clusters: &[Cluster], groups: usize) -> Result<Schedule> {
    check_group_count(clusters, groups)?;
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    order.sort_by(|&a, &b| {
        clusters[b]
            .est_cost
            .total_cmp(&clusters[a].est_cost)
            .then(clusters[a].id.cmp(&clusters[b].id))
    });
    let mut loads = vec![0.0_f64; groups];
    let mut assignment = vec![0usize; clusters.len()];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); groups];
    for &c in &order {
        let mut g = 0;
        for (i, &load) in loads.iter().enumerate().skip(1) {
            if load < loads[g] {
                g = i;
            }
        }
        loads[g] += clusters[c].est_cost;
        assignment[c] = g;
        members[g].push(c);
    }
    // keep each group's clusters in the order LPT placed them
    let mut schedule = Schedule::from_assignment("lpt", clusters, &assignment, groups);
    for (g, m) in members.iter().enumerate() {
        schedule.groups[g].cluster_ids = m.iter().map(|&c| clusters[c].id).collect();
        schedule.groups[g].total_cost = loads[g];
    }
    schedule.makespan = loads.iter().copied().fold(0.0, f64::max);
    Ok(schedule)
}

/// Minimum-makespan partition into exactly `groups` non-empty groups. Ties
/// go to the lexicographically smallest assignment vector.
pub fn optimal_grouping_bruteforce(clusters: &[Cluster], groups: usize) -> Result<Schedule> {
    if clusters.len() > MAX_BRUTEFORCE_CLUSTERS {
        return Err(Error::Capacity(format!(
            "exhaustive grouping supports at most {MAX_BRUTEFORCE_CLUSTERS} clusters, got {}",
            clusters.len()
        )));
    }
    check_group_count(clusters, groups)?;

    struct Search {
        costs: Vec<f64>,
        groups: usize,
        current: Vec<usize>,
        loads: Vec<f64>,
        best: Option<(f64, Vec<usize>)>,
    }

    impl Search {
        // Assignments are restricted-growth strings, so each partition is
        // visited once under its lexicographically smallest labelling.
        fn visit(&mut self, i: usize, used: usize) {
            let n = self.costs.len();
            let partial = self.loads.iter().copied().fold(0.0, f64::max);
            if let Some((best, _)) = &self.best {
                if partial >= *best {
                    return;
                }
            }
            if n - i < self.groups - used {
                return;
            }
            if i == n {
                self.best = Some((partial, self.current.clone()));
                return;
            }
            let limit = (used + 1).min(self.groups);
            for g in 0..limit {
                let before = self.loads[g];
                self.current.push(g);
                self.loads[g] = before + self.costs[i];
                self.visit(i + 1, used.max(g + 1));
                self.loads[g] = before;
                self.current.pop();
            }
        }
    }

    let mut search = Search {
        costs: clusters.iter().map(|c| c.est_cost).collect(),
        groups,
        current: Vec::with_capacity(clusters.len()),
        loads: vec![0.0; groups],
        best: None,
    };
    search.visit(0, 0);
    let (_, assignment) = search
        .best
        .expect("at least one partition exists when 1 <= groups <= n");
    Ok(Schedule::from_assignment(
        "optimal",
        clusters,
        &assignment,
        groups,
    ))
}

/// Tasks plus their clustering and group schedule, ready to train on.
#[derive(Debug, Clone)]
pub struct Workload {
    pub tasks: Vec<Task>,
    pub clusters: Vec<Cluster>,
    pub schedule: Schedule,
}

impl Workload {
    /// Checks that task ids are positions, clusters partition the tasks, and
    /// the schedule partitions the clusters.
    pub fn new(tasks: Vec<Task>, clusters: Vec<Cluster>, schedule: Schedule) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::EmptyInput("workload has no tasks"));
        }
        if let Some(t) = tasks.iter().enumerate().find(|(i, t)| t.id != *i) {
            return Err(Error::Consistency(format!(
                "task at position {} has id {}",
                t.0, t.1.id
            )));
        }
        let mut covered = vec![0usize; tasks.len()];
        for (i, c) in clusters.iter().enumerate() {
            if c.id != i || c.task_ids.is_empty() {
                return Err(Error::Consistency(format!(
                    "cluster {i} is empty or misnumbered"
                )));
            }
            for &t in &c.task_ids {
                *covered.get_mut(t).ok_or_else(|| {
                    Error::Consistency(format!("cluster {i} names unknown task {t}"))
                })? += 1;
            }
        }
        if covered.iter().any(|&c| c != 1) {
            return Err(Error::Consistency(
                "clusters do not partition the tasks".into(),
            ));
        }
        if !schedule.is_partition_of(&clusters) {
            return Err(Error::Consistency(
                "schedule does not partition the clusters".into(),
            ));
        }
        Ok(Self {
            tasks,
            clusters,
            schedule,
        })
    }

    /// Every task in one cluster, one group.
    pub fn single_cluster(tasks: Vec<Task>, cfg: &MetaConfig) -> Result<Self> {
        let mut c = Cluster {
            id: 0,
            task_ids: (0..tasks.len()).collect(),
            family_label: None,
            est_cost: 0.0,
        };
        let first = tasks.first().map(|t| t.family);
        if tasks.iter().all(|t| Some(t.family) == first) {
            c.family_label = first;
        }
        c.est_cost = estimate_cost(&c, &tasks, cfg, None);
        let clusters = vec![c];
        let schedule = group_clusters_lpt(&clusters, 1)?;
        Self::new(tasks, clusters, schedule)
    }

    pub fn task(&self, position: usize) -> Result<&Task> {
        self.tasks
            .get(position)
            .ok_or_else(|| Error::Consistency(format!("no task at position {position}")))
    }

    pub fn cluster(&self, id: usize) -> Result<&Cluster> {
        self.clusters
            .get(id)
            .ok_or_else(|| Error::Consistency(format!("no cluster with id {id}")))
    }

    /// Cluster id of every task, by task position.
    pub fn cluster_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.tasks.len()];
        for c in &self.clusters {
            for &t in &c.task_ids {
                out[t] = c.id;
            }
        }
        out
    }
}
