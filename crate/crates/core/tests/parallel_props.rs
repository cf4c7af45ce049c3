use proptest::prelude::*;

use macc_core::learned_optimizer::{init_params, OptimizerParams};
use macc_core::meta_engine::{prepare_workload, task_stream, MetaConfig};
use macc_core::numcore::RngStream;
use macc_core::parallel_exec::{
    deterministic_mean, hardware_threads, parallel_batch_grads, parallel_cluster_step,
    ClusterExecutor, WorkerPool,
};
use macc_core::tasks::{batches, generate_task, Task, TaskFamily};
use macc_core::Error;

/// Degrees every equivalence property is run at: 1, 2 and the larger of the
/// host's thread count and 4 (oversubscribed on small hosts).
fn degrees() -> [usize; 3] {
    [1, 2, hardware_threads().max(4)]
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn any_task(family_ix: usize, seed: u64) -> Task {
    let f = TaskFamily::ALL[family_ix % 5];
    generate_task(f, seed, f.natural_dims().unwrap_or(1 + (seed % 4) as usize)).unwrap()
}

fn live(seed: u64, hidden: usize) -> OptimizerParams {
    let mut w = init_params(seed, hidden).unwrap();
    let mut rng = RngStream::new(seed);
    w.out_w
        .iter_mut()
        .for_each(|v| *v = rng.uniform_range(-0.3, 0.3));
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn batch_grads_independent_of_degree(family in 0usize..5, seed in 0u64..10_000, count in 1usize..9) {
        let task = any_task(family, seed);
        let mut rng = RngStream::new(seed);
        let params: Vec<f64> = (0..task.dims).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let bs = batches(&task, &mut rng, 16, count).unwrap();
        let reference = parallel_batch_grads(&task, &params, &bs, &WorkerPool::sequential()).unwrap();
        for d in degrees() {
            let got = parallel_batch_grads(&task, &params, &bs, &WorkerPool::new(d).unwrap()).unwrap();
            prop_assert_eq!(got.loss.to_bits(), reference.loss.to_bits());
            prop_assert_eq!(bits(&got.grad), bits(&reference.grad));
        }
    }

    #[test]
    fn cluster_step_independent_of_degree(
        families in prop::collection::vec(0usize..5, 2..7),
        seed in 0u64..10_000,
        k_pick in 0usize..10,
        g_pick in 0usize..10,
    ) {
        let tasks: Vec<Task> = families.iter().enumerate().map(|(i, &f)| any_task(f, seed + i as u64)).collect();
        let k = 1 + k_pick % tasks.len();
        let g = 1 + g_pick % k;
        let cfg = MetaConfig {
            unroll_steps: 3,
            batch_size: 16,
            k_clusters: k,
            g_groups: g,
            cluster_strategy: "kmeans".into(),
            seed,
            hidden: 3,
            ..MetaConfig::default()
        };
        let w = live(seed, cfg.hidden);
        let wl = prepare_workload(tasks, &w, &cfg).unwrap();
        let reference = parallel_cluster_step(&wl, &w, &cfg, 0, &ClusterExecutor::new(1, g, 1).unwrap()).unwrap();
        for gd in degrees() {
            for bd in [1, 2] {
                let got = parallel_cluster_step(&wl, &w, &cfg, 0, &ClusterExecutor::new(gd, g, bd).unwrap()).unwrap();
                prop_assert_eq!(bits(&got.averaged), bits(&reference.averaged));
                prop_assert_eq!(got.clusters.len(), reference.clusters.len());
                for (a, b) in got.clusters.iter().zip(&reference.clusters) {
                    prop_assert_eq!(a.cluster_id, b.cluster_id);
                    prop_assert_eq!(bits(&a.meta_grad), bits(&b.meta_grad));
                    prop_assert_eq!(a.meta_loss.to_bits(), b.meta_loss.to_bits());
                }
            }
        }
    }

    #[test]
    fn mean_of_copies_is_exact(g in prop::collection::vec(-1e6f64..1e6, 1..20), k in 1usize..40) {
        let items = vec![g.clone(); k];
        prop_assert_eq!(bits(&deterministic_mean(&items).unwrap()), bits(&g));
    }

    #[test]
    fn failing_item_loses_no_work(n in 1usize..30, bad_pick in 0usize..30, d in 1usize..5) {
        let bad = bad_pick % n;
        let items: Vec<usize> = (0..n).collect();
        let err = WorkerPool::new(d)
            .unwrap()
            .map_indexed(&items, |i, _| if i == bad { Err(Error::Numeric("boom".into())) } else { Ok(i) })
            .unwrap_err();
        match err {
            Error::WorkItem { index, completed, .. } => {
                prop_assert_eq!(index, bad);
                prop_assert_eq!(completed, n - 1);
            }
            other => prop_assert!(false, "unexpected error {other}"),
        }
    }

    #[test]
    fn streams_identical_across_workers(seed in any::<u64>(), n in 1usize..16) {
        let items: Vec<usize> = (0..n).collect();
        let draw = |i: usize| {
            let mut s = task_stream(seed, 3, i);
            (0..8).map(|_| s.next_u64()).collect::<Vec<u64>>()
        };
        let reference: Vec<Vec<u64>> = items.iter().map(|&i| draw(i)).collect();
        for d in degrees() {
            let got = WorkerPool::new(d).unwrap().map_indexed(&items, |i, _| Ok(draw(i))).unwrap();
            prop_assert_eq!(&got, &reference);
        }
    }
}
