//! Benchmark runs: configuration, baseline vs. optimized timing, held-out
//! evaluation, and the report files.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::learned_optimizer::{init_params, OptimizerParams};
use crate::meta_engine::{
    evaluate_optimizer, prepare_workload, EvalReport, IterationRecord, MetaConfig, Optimized,
    Pipeline, Sequential,
};
use crate::numcore::derive_seed;
use crate::parallel_exec::{hardware_threads, host_threads};
use crate::scheduler::{Cluster, Schedule};
use crate::tasks::{generate_task, Task, TaskFamily};

pub const REPORT_VERSION: u32 = 1;
/// Dimension used for quadratic and bowl tasks when a manifest entry omits it.
pub const DEFAULT_FREE_DIMS: usize = 4;
/// Minimum repetitions for timed comparisons.
pub const MIN_COMPARE_REPETITIONS: usize = 3;

const TEST_SALT: u64 = 0x7465_7374;

pub const TIMINGS_HEADER: &str = "num_clusters,num_tasks,base_time_s,optimized_time_s,speedup";
pub const LOSS_CURVES_HEADER: &str = "iteration,cluster_id,meta_loss";
pub const TREND_HEADER: &str = "num_tasks,speedup";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sequential,
    Optimized,
    Compare,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Mode::Sequential),
            "optimized" => Ok(Mode::Optimized),
            "compare" => Ok(Mode::Compare),
            _ => Err(Error::config(format!(
                "unknown mode `{s}` (known: sequential, optimized, compare)"
            ))),
        }
    }
}

/// One manifest entry: `count` tasks of `family`, seeds derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub family: TaskFamily,
    #[serde(default = "one")]
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl TaskSpec {
    pub const FIELDS: &'static [&'static str] = &["family", "count", "dims", "seed"];

    pub fn resolved_dims(&self) -> usize {
        self.dims
            .or(self.family.natural_dims())
            .unwrap_or(DEFAULT_FREE_DIMS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: Mode,
    pub repetitions: usize,
    pub out_dir: PathBuf,
    /// Held-out tasks, drawn round-robin from the manifest entries.
    pub test_tasks: usize,
    #[serde(flatten)]
    pub meta: MetaConfig,
    pub tasks: Vec<TaskSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Compare,
            repetitions: MIN_COMPARE_REPETITIONS,
            out_dir: PathBuf::from("macc-out"),
            test_tasks: 5,
            meta: MetaConfig::default(),
            tasks: Vec::new(),
        }
    }
}

impl RunConfig {
    pub const FIELDS: &'static [&'static str] =
        &["mode", "repetitions", "out_dir", "test_tasks", "tasks"];

    pub fn total_tasks(&self) -> usize {
        self.tasks.iter().map(|t| t.count).sum()
    }

    pub fn families(&self) -> BTreeSet<TaskFamily> {
        self.tasks.iter().map(|t| t.family).collect()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.meta.violations();
        if self.repetitions == 0 {
            v.push("repetitions must be at least 1".into());
        }
        if self.mode == Mode::Compare && self.repetitions < MIN_COMPARE_REPETITIONS {
            v.push(format!(
                "compare mode needs repetitions >= {MIN_COMPARE_REPETITIONS}, got {}",
                self.repetitions
            ));
        }
        if self.test_tasks == 0 {
            v.push("test_tasks must be at least 1".into());
        }
        if self.tasks.is_empty() {
            v.push("tasks must list at least one entry".into());
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.count == 0 {
                v.push(format!("tasks[{i}].count must be at least 1"));
            }
            match (t.dims, t.family.natural_dims()) {
                (Some(0), _) => v.push(format!("tasks[{i}].dims must be at least 1")),
                (Some(d), Some(n)) if d != n => v.push(format!(
                    "tasks[{i}].dims: {} tasks have {n} parameters, got {d}",
                    t.family
                )),
                _ => {}
            }
        }
        let total = self.total_tasks();
        if total > 0 && self.meta.k_clusters > total {
            v.push(format!(
                "k_clusters ({}) exceeds the number of tasks ({total})",
                self.meta.k_clusters
            ));
        }
        let families = self.families().len();
        if self.meta.cluster_strategy == "by_family"
            && families > 0
            && self.meta.k_clusters != 1
            && self.meta.k_clusters != families
        {
            v.push(format!(
                "by_family clustering needs k_clusters 1 or the number of families ({families}), got {}",
                self.meta.k_clusters
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

    /// Training tasks, in manifest order.
    pub fn training_tasks(&self) -> Result<Vec<Task>> {
        let mut out = Vec::with_capacity(self.total_tasks());
        for spec in &self.tasks {
            for j in 0..spec.count {
                let seed = derive_seed(spec.seed, &[j as u64]);
                out.push(
                    generate_task(spec.family, seed, spec.resolved_dims())?.with_id(out.len()),
                );
            }
        }
        Ok(out)
    }

    /// Held-out tasks; fails if any coincides with a training task.
    pub fn test_task_set(&self) -> Result<Vec<Task>> {
        if self.tasks.is_empty() {
            return Err(Error::EmptyInput("task manifest is empty"));
        }
        let train: BTreeSet<(TaskFamily, u64)> = self
            .tasks
            .iter()
            .flat_map(|s| (0..s.count).map(move |j| (s.family, derive_seed(s.seed, &[j as u64]))))
            .collect();
        let mut out = Vec::with_capacity(self.test_tasks);
        for j in 0..self.test_tasks {
            let spec = &self.tasks[j % self.tasks.len()];
            let seed = derive_seed(spec.seed, &[TEST_SALT, j as u64]);
            if train.contains(&(spec.family, seed)) {
                return Err(Error::Consistency(format!(
                    "test task {j} coincides with a training task"
                )));
            }
            out.push(generate_task(spec.family, seed, spec.resolved_dims())?.with_id(j));
        }
        Ok(out)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Numeric(format!("serializing config: {e}")))
    }
}

/// Parses a TOML or JSON config (by extension). A `report.json` is accepted
/// too; its embedded config is used.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    parse_config_str(&text, is_json).map_err(|e| match e {
        Error::Config(v) => Error::Config(
            v.into_iter()
                .map(|m| format!("{}: {m}", path.display()))
                .collect(),
        ),
        other => other,
    })
}

pub fn parse_config_str(text: &str, is_json: bool) -> Result<RunConfig> {
    let value: Value = if is_json {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid JSON: {e}")))?
    } else {
        toml::from_str(text).map_err(|e| Error::config(format!("invalid TOML: {e}")))?
    };
    config_from_value(value)
}

/// Walks every key so that all unknown or ill-typed entries are reported
/// together, then checks the semantic constraints.
pub fn config_from_value(value: Value) -> Result<RunConfig> {
    let value = match value {
        Value::Object(mut m) if m.contains_key("report_version") => {
            m.remove("config").unwrap_or(Value::Null)
        }
        v => v,
    };
    let Value::Object(obj) = value else {
        return Err(Error::config("config must be a table of keys"));
    };
    let mut errors = Vec::new();
    for (key, val) in &obj {
        if key == "tasks" {
            let Some(entries) = val.as_array() else {
                errors.push("tasks: expected a list of task entries".into());
                continue;
            };
            for (i, entry) in entries.iter().enumerate() {
                let Some(fields) = entry.as_object() else {
                    errors.push(format!("tasks[{i}]: expected a table"));
                    continue;
                };
                let mut entry_ok = true;
                for k in fields
                    .keys()
                    .filter(|k| !TaskSpec::FIELDS.contains(&k.as_str()))
                {
                    errors.push(format!("tasks[{i}]: unknown key `{k}`"));
                    entry_ok = false;
                }
                if entry_ok {
                    if let Err(e) = serde_json::from_value::<TaskSpec>(entry.clone()) {
                        errors.push(format!("tasks[{i}]: {e}"));
                    }
                }
            }
        } else if RunConfig::FIELDS.contains(&key.as_str())
            || MetaConfig::FIELDS.contains(&key.as_str())
        {
            let single = Value::Object([(key.clone(), val.clone())].into_iter().collect());
            if let Err(e) = serde_json::from_value::<RunConfig>(single) {
                errors.push(format!("{key}: {e}"));
            }
        } else {
            errors.push(format!("unknown key `{key}`"));
        }
    }
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let cfg: RunConfig =
        serde_json::from_value(Value::Object(obj)).map_err(|e| Error::config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTime {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub pipeline: String,
    /// Wall time of each repetition: workload preparation (optimized only)
    /// plus both training loops.
    pub times_s: Vec<f64>,
    pub median_time_s: f64,
    pub meta_updates: usize,
    pub iterations: Vec<IterationRecord>,
    /// Per-group busy time of the last repetition (optimized only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub group_times_s: Vec<f64>,
    pub params_fingerprint: String,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub report_version: u32,
    pub config: RunConfig,
    pub host_threads: usize,
    pub hardware_threads: usize,
    pub num_tasks: usize,
    pub clusters: Vec<Cluster>,
    pub schedule: Schedule,
    pub pipelines: Vec<PipelineReport>,
    pub untrained_eval: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_time_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimized_time_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
    pub phases: Vec<PhaseTime>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Trained optimizer of each pipeline, not serialized.
    #[serde(skip)]
    pub trained: Vec<(String, OptimizerParams)>,
}

impl RunReport {
    pub fn pipeline(&self, name: &str) -> Option<&PipelineReport> {
        self.pipelines.iter().find(|p| p.pipeline == name)
    }

    /// The pipeline whose curves and optimizer are reported as the result.
    pub fn primary(&self) -> Option<&PipelineReport> {
        self.pipeline("optimized")
            .or_else(|| self.pipelines.first())
    }

    pub fn primary_params(&self) -> Option<&OptimizerParams> {
        let name = &self.primary()?.pipeline;
        self.trained.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    /// The report with every timing field cleared, for reproducibility checks.
    pub fn without_timings(&self) -> RunReport {
        let mut r = self.clone();
        r.base_time_s = None;
        r.optimized_time_s = None;
        r.speedup = None;
        r.phases.clear();
        r.host_threads = 0;
        for p in &mut r.pipelines {
            p.times_s.clear();
            p.median_time_s = 0.0;
            p.group_times_s.clear();
        }
        if r.config.meta.cost_model == crate::scheduler::CostModel::Probe {
            for c in &mut r.clusters {
                c.est_cost = 0.0;
            }
            r.schedule.makespan = 0.0;
            for g in &mut r.schedule.groups {
                g.total_cost = 0.0;
            }
        }
        r
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    })
}

/// FNV-1a over the little-endian bytes of the flat parameters.
pub fn params_fingerprint(w: &OptimizerParams) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in w.flatten() {
        for b in v.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

fn timed<T>(phases: &mut Vec<PhaseTime>, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let started = Instant::now();
    let out = f();
    let seconds = started.elapsed().as_secs_f64();
    info!("phase {phase}: {seconds:.3}s");
    phases.push(PhaseTime {
        phase: phase.to_string(),
        seconds,
    });
    out
}

/// Executes the configured mode. On failure the partially filled report is
/// returned alongside the error.
pub fn run(cfg: &RunConfig) -> std::result::Result<RunReport, (Box<RunReport>, Error)> {
    let mut report = RunReport {
        report_version: REPORT_VERSION,
        config: cfg.clone(),
        host_threads: host_threads(),
        hardware_threads: hardware_threads(),
        num_tasks: cfg.total_tasks(),
        clusters: Vec::new(),
        schedule: Schedule {
            strategy: String::new(),
            groups: Vec::new(),
            makespan: 0.0,
        },
        pipelines: Vec::new(),
        untrained_eval: None,
        base_time_s: None,
        optimized_time_s: None,
        speedup: None,
        phases: Vec::new(),
        error: None,
        trained: Vec::new(),
    };
    match run_into(cfg, &mut report) {
        Ok(()) => Ok(report),
        Err(e) => {
            report.error = Some(e.to_string());
            Err((Box::new(report), e))
        }
    }
}

fn run_into(cfg: &RunConfig, report: &mut RunReport) -> Result<()> {
    cfg.validate()?;
    let meta = &cfg.meta;
    let w0 = init_params(meta.seed, meta.hidden)?;
    let phases = &mut report.phases;
    let (tasks, test_tasks) = timed(phases, "generate", || {
        Ok((cfg.training_tasks()?, cfg.test_task_set()?))
    })?;
    let workload = timed(phases, "prepare", || {
        prepare_workload(tasks.clone(), &w0, meta)
    })?;
    report.clusters = workload.clusters.clone();
    report.schedule = workload.schedule.clone();

    let mut wanted: Vec<&dyn Pipeline> = Vec::new();
    if matches!(cfg.mode, Mode::Sequential | Mode::Compare) {
        wanted.push(&Sequential);
    }
    if matches!(cfg.mode, Mode::Optimized | Mode::Compare) {
        wanted.push(&Optimized);
    }
    for pipeline in wanted {
        let name = pipeline.name();
        let mut times = Vec::with_capacity(cfg.repetitions);
        let mut last = None;
        for rep in 0..cfg.repetitions {
            let started = Instant::now();
            let outcome = if name == "optimized" {
                let wl = prepare_workload(tasks.clone(), &w0, meta)?;
                pipeline.train(&wl, &w0, meta)
            } else {
                pipeline.train(&workload, &w0, meta)
            }
            .map_err(|e| e.context(format!("{name} pipeline, repetition {rep}")))?;
            let elapsed = started.elapsed().as_secs_f64();
            info!("{name} repetition {rep}: {elapsed:.3}s");
            report.phases.push(PhaseTime {
                phase: format!("train_{name}_{rep}"),
                seconds: elapsed,
            });
            times.push(elapsed);
            if let Some(prev) = &last {
                let prev: &crate::meta_engine::TrainOutcome = prev;
                if prev.params != outcome.params {
                    return Err(Error::Consistency(format!(
                        "{name} pipeline is not reproducible across repetitions"
                    )));
                }
            }
            last = Some(outcome);
        }
        let outcome = last.ok_or(Error::EmptyInput("no repetitions"))?;
        let eval = timed(&mut report.phases, &format!("eval_{name}"), || {
            evaluate_optimizer(&outcome.params, &test_tasks, meta)
        })?;
        report.pipelines.push(PipelineReport {
            pipeline: name.to_string(),
            median_time_s: median(&times).unwrap_or(0.0),
            times_s: times,
            meta_updates: outcome.meta_updates,
            iterations: outcome.iterations,
            group_times_s: outcome.group_times_s,
            params_fingerprint: params_fingerprint(&outcome.params),
            eval,
        });
        report.trained.push((name.to_string(), outcome.params));
    }
    report.untrained_eval = Some(timed(&mut report.phases, "eval_untrained", || {
        evaluate_optimizer(&w0, &test_tasks, meta)
    })?);

    report.base_time_s = report.pipeline("sequential").map(|p| p.median_time_s);
    report.optimized_time_s = report.pipeline("optimized").map(|p| p.median_time_s);
    if let (Some(b), Some(o)) = (report.base_time_s, report.optimized_time_s) {
        report.speedup = Some(b / o);
    }
    Ok(())
}

fn opt_fixed(v: Option<f64>, places: usize) -> String {
    v.map(|x| format!("{x:.places$}")).unwrap_or_default()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes report.json, timings.csv, loss_curves.csv and schedule.json.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report_path = dir.join("report.json");
    write_file(&report_path, &to_pretty(report)?)?;

    let timings_path = dir.join("timings.csv");
    let timings = format!(
        "{TIMINGS_HEADER}\n{},{},{},{},{}\n",
        report.clusters.len(),
        report.num_tasks,
        opt_fixed(report.base_time_s, 6),
        opt_fixed(report.optimized_time_s, 6),
        opt_fixed(report.speedup, 4),
    );
    write_file(&timings_path, &timings)?;

    let curves_path = dir.join("loss_curves.csv");
    let mut curves = format!("{LOSS_CURVES_HEADER}\n");
    if let Some(p) = report.primary() {
        for it in &p.iterations {
            for (cid, loss) in &it.cluster_losses {
                curves.push_str(&format!("{},{cid},{loss}\n", it.iteration));
            }
        }
    }
    write_file(&curves_path, &curves)?;

    let schedule_path = dir.join("schedule.json");
    write_file(&schedule_path, &to_pretty(&report.schedule)?)?;
    Ok(vec![report_path, timings_path, curves_path, schedule_path])
}

fn to_pretty<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)
        .map_err(|e| Error::Numeric(format!("serializing report: {e}")))?;
    s.push('\n');
    Ok(s)
}

/// One row of the timing table: clusters, base and optimized seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingRow {
    pub clusters: usize,
    pub base_time_s: f64,
    pub optimized_time_s: f64,
}

impl TimingRow {
    pub fn speedup(&self) -> f64 {
        self.base_time_s / self.optimized_time_s
    }
}

impl fmt::Display for TimingRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {:.2}, {:.2})",
            self.clusters, self.base_time_s, self.optimized_time_s
        )
    }
}

pub fn format_speedup(base: f64, optimized: f64) -> String {
    format!("{:.4}", base / optimized)
}

/// Plain-text timing table with a speedup column.
pub fn format_timing_table(rows: &[TimingRow]) -> String {
    let mut out = format!(
        "{:>8}  {:>14}  {:>18}  {:>8}\n",
        "clusters", "base time (s)", "optimized time (s)", "speedup"
    );
    for r in rows {
        out.push_str(&format!(
            "{:>8}  {:>14.2}  {:>18.2}  {:>8}\n",
            r.clusters,
            r.base_time_s,
            r.optimized_time_s,
            format_speedup(r.base_time_s, r.optimized_time_s)
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub num_tasks: usize,
    pub num_clusters: usize,
    pub base_time_s: f64,
    pub optimized_time_s: f64,
    pub speedup: f64,
}

/// Config for one sweep point: the manifest scaled round-robin to `n`
/// tasks, with `by_family` k matched to the families present and G capped
/// at k.
pub fn sweep_point_config(cfg: &RunConfig, n: usize) -> Result<RunConfig> {
    if cfg.tasks.is_empty() {
        return Err(Error::EmptyInput("task manifest is empty"));
    }
    let s = cfg.tasks.len();
    let mut out = cfg.clone();
    out.mode = Mode::Compare;
    out.tasks = cfg
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| TaskSpec {
            count: n / s + usize::from(i < n % s),
            ..t.clone()
        })
        .filter(|t| t.count > 0)
        .collect();
    let k = if out.meta.cluster_strategy == "by_family" {
        out.families().len()
    } else {
        cfg.meta.k_clusters.min(n)
    };
    out.meta.k_clusters = k;
    out.meta.g_groups = cfg.meta.g_groups.min(k);
    out.out_dir = cfg.out_dir.join(format!("tasks_{n}"));
    Ok(out)
}

/// Compare runs at each task count; writes every point's report under
/// `out_dir/tasks_<n>` and the trend to `out_dir/trend.csv`.
pub fn sweep(cfg: &RunConfig, task_counts: &[usize]) -> Result<Vec<SweepPoint>> {
    if task_counts.is_empty() {
        return Err(Error::config("task counts must not be empty"));
    }
    let mut problems = Vec::new();
    if task_counts[0] == 0 {
        problems.push("task counts must be positive".to_string());
    }
    if task_counts.windows(2).any(|w| w[0] >= w[1]) {
        problems.push(format!(
            "task counts must be strictly ascending, got {task_counts:?}"
        ));
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut points = Vec::with_capacity(task_counts.len());
    for &n in task_counts {
        let point_cfg = sweep_point_config(cfg, n)?;
        point_cfg
            .validate()
            .map_err(|e| e.context(format!("sweep point with {n} tasks")))?;
        let report = match run(&point_cfg) {
            Ok(r) => r,
            Err((partial, e)) => {
                emit_report(&partial, &point_cfg.out_dir)?;
                return Err(e.context(format!("sweep point with {n} tasks")));
            }
        };
        emit_report(&report, &point_cfg.out_dir)?;
        let (Some(b), Some(o), Some(s)) =
            (report.base_time_s, report.optimized_time_s, report.speedup)
        else {
            return Err(Error::Consistency("compare run produced no speedup".into()));
        };
        points.push(SweepPoint {
            num_tasks: n,
            num_clusters: report.clusters.len(),
            base_time_s: b,
            optimized_time_s: o,
            speedup: s,
        });
        emit_trend(&points, &cfg.out_dir)?;
    }
    Ok(points)
}

pub fn emit_trend(points: &[SweepPoint], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("trend.csv");
    let mut s = format!("{TREND_HEADER}\n");
    for p in points {
        s.push_str(&format!("{},{:.4}\n", p.num_tasks, p.speedup));
    }
    write_file(&path, &s)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timing_row_fixture() {
        let row = TimingRow {
            clusters: 2,
            base_time_s: 1450.15,
            optimized_time_s: 826.53,
        };
        assert_eq!(row.to_string(), "(2, 1450.15, 826.53)");
        assert_eq!(format_speedup(1450.15, 826.53), "1.7545");
        assert!(format_timing_table(&[row]).contains("1.7545"));
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config_str(
            "mode = \"sequential\"\nrepetitions = 1\n[[tasks]]\nfamily = \"quadratic\"\n",
            false,
        )
        .unwrap();
        assert_eq!(cfg.meta, MetaConfig::default());
        assert_eq!(cfg.tasks[0].count, 1);
        assert_eq!(cfg.tasks[0].resolved_dims(), DEFAULT_FREE_DIMS);
    }

    #[test]
    fn every_violation_is_listed() {
        let text = "bogus = 1\nunroll_steps = \"x\"\nk_clusters = 1\ng_groups = 2\n[[tasks]]\nfamily = \"quadratic\"\nextra = 3\n";
        let Err(Error::Config(v)) = parse_config_str(text, false) else {
            panic!("expected config error")
        };
        assert_eq!(v.len(), 3, "{v:?}");
        let Err(Error::Config(v)) = parse_config_str(
            "k_clusters = 1\ng_groups = 2\n[[tasks]]\nfamily = \"bowl\"\n",
            false,
        ) else {
            panic!("expected config error")
        };
        assert!(v.iter().any(|m| m.contains("g_groups")), "{v:?}");
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.meta.batch_parallel_degree = Some(2);
        cfg.tasks = vec![
            TaskSpec {
                family: TaskFamily::Quadratic,
                count: 3,
                dims: Some(3),
                seed: 5,
            },
            TaskSpec {
                family: TaskFamily::TwoD,
                count: 2,
                dims: None,
                seed: 1,
            },
        ];
        cfg.meta.k_clusters = 2;
        let text = cfg.to_toml().unwrap();
        assert_eq!(parse_config_str(&text, false).unwrap(), cfg);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(parse_config_str(&json, true).unwrap(), cfg);
    }

    #[test]
    fn test_set_is_disjoint_and_deterministic() {
        let cfg = RunConfig {
            tasks: vec![TaskSpec {
                family: TaskFamily::Bowl,
                count: 4,
                dims: None,
                seed: 9,
            }],
            test_tasks: 6,
            ..RunConfig::default()
        };
        let a = cfg.test_task_set().unwrap();
        assert_eq!(a.len(), 6);
        let train = cfg.training_tasks().unwrap();
        for t in &a {
            assert!(train.iter().all(|u| u.seed != t.seed));
        }
        assert_eq!(
            a.iter().map(|t| t.seed).collect::<Vec<_>>(),
            cfg.test_task_set()
                .unwrap()
                .iter()
                .map(|t| t.seed)
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn sweep_point_scales_round_robin() {
        let mut cfg = RunConfig {
            tasks: vec![
                TaskSpec {
                    family: TaskFamily::Quadratic,
                    count: 1,
                    dims: None,
                    seed: 0,
                },
                TaskSpec {
                    family: TaskFamily::Bowl,
                    count: 1,
                    dims: None,
                    seed: 1,
                },
            ],
            ..RunConfig::default()
        };
        cfg.meta.k_clusters = 2;
        cfg.meta.g_groups = 2;
        let p = sweep_point_config(&cfg, 5).unwrap();
        assert_eq!(
            p.tasks.iter().map(|t| t.count).collect::<Vec<_>>(),
            vec![3, 2]
        );
        let p = sweep_point_config(&cfg, 1).unwrap();
        assert_eq!(p.tasks.len(), 1);
        assert_eq!((p.meta.k_clusters, p.meta.g_groups), (1, 1));
        assert!(sweep(&cfg, &[5, 5]).unwrap_err().is_config());
    }

    #[test]
    fn median_of_three() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[]), None);
    }
}
