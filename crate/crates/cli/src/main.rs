use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use macc_core::bench::{self, format_timing_table, Mode, RunConfig, TimingRow};
use macc_core::learned_optimizer::save_checkpoint;
use macc_core::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "macc",
    version,
    about = "Meta-train a learned optimizer, sequentially or cluster-parallel"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one benchmark and write its report files.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["sequential", "optimized", "compare"])]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Batch-gradient workers per group.
        #[arg(long)]
        degree: Option<usize>,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare runs at increasing task counts.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        task_counts: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn fail(e: &Error) -> ExitCode {
    if e.is_config() {
        eprintln!("configuration error: {e}");
        ExitCode::from(EXIT_CONFIG)
    } else {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_RUNTIME)
    }
}

fn apply_overrides(
    mut cfg: RunConfig,
    mode: Option<String>,
    seed: Option<u64>,
    degree: Option<usize>,
    clusters: Option<usize>,
    groups: Option<usize>,
    out: Option<PathBuf>,
) -> macc_core::Result<RunConfig> {
    if let Some(m) = mode {
        cfg.mode = m.parse::<Mode>()?;
    }
    if let Some(s) = seed {
        cfg.meta.seed = s;
    }
    if degree.is_some() {
        cfg.meta.batch_parallel_degree = degree;
    }
    if let Some(k) = clusters {
        cfg.meta.k_clusters = k;
    }
    if let Some(g) = groups {
        cfg.meta.g_groups = g;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_command(cfg: RunConfig) -> ExitCode {
    let (report, failure) = match bench::run(&cfg) {
        Ok(r) => (r, None),
        Err((partial, e)) => (*partial, Some(e)),
    };
    if let Err(e) = bench::emit_report(&report, &cfg.out_dir) {
        error!("writing report: {e}");
        return fail(failure.as_ref().unwrap_or(&e));
    }
    if let Some(e) = failure {
        eprintln!("partial report written to {}", cfg.out_dir.display());
        return fail(&e);
    }
    if let Some(w) = report.primary_params() {
        let path = cfg.out_dir.join("optimizer.ckpt");
        if let Err(e) = save_checkpoint(&path, w) {
            return fail(&e);
        }
    }
    for p in &report.pipelines {
        println!(
            "{:<12} median {:>10.4}s  test loss {:.6} -> {:.6}{}",
            p.pipeline,
            p.median_time_s,
            p.eval.mean_initial_loss,
            p.eval.mean_final_loss,
            p.eval
                .mean_accuracy
                .map(|a| format!("  accuracy {a:.4}"))
                .unwrap_or_default()
        );
    }
    if let (Some(b), Some(o)) = (report.base_time_s, report.optimized_time_s) {
        print!(
            "{}",
            format_timing_table(&[TimingRow {
                clusters: report.clusters.len(),
                base_time_s: b,
                optimized_time_s: o,
            }])
        );
    }
    println!("report written to {}", cfg.out_dir.display());
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.command {
        Command::Run {
            config,
            mode,
            seed,
            degree,
            clusters,
            groups,
            out,
        } => {
            let cfg = match bench::parse_config(&config)
                .and_then(|c| apply_overrides(c, mode, seed, degree, clusters, groups, out))
            {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            info!("running {:?} on {} tasks", cfg.mode, cfg.total_tasks());
            run_command(cfg)
        }
        Command::Sweep {
            config,
            task_counts,
            out,
        } => {
            let cfg = match bench::parse_config(&config) {
                Ok(mut c) => {
                    if let Some(o) = out {
                        c.out_dir = o;
                    }
                    c
                }
                Err(e) => return fail(&e),
            };
            match bench::sweep(&cfg, &task_counts) {
                Ok(points) => {
                    println!("num_tasks  clusters  speedup");
                    for p in &points {
                        println!(
                            "{:>9}  {:>8}  {:.4}",
                            p.num_tasks, p.num_clusters, p.speedup
                        );
                    }
                    println!(
                        "trend written to {}",
                        cfg.out_dir.join("trend.csv").display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
    }
}
