//! Wall-clock benchmarks for the hot paths: fusion forward and backward,
//! the policy objective, clustering, tree search, and a full environment
//! rollout through the policy.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use grpolab_core::advantage::{AdvantageBatch, AdvantageHyper, AdvantageSample};
use grpolab_core::cluster::kmeans;
use grpolab_core::env::generate_cohort;
use grpolab_core::fusion::pool_state;
use grpolab_core::grpo::{grpo_objective, FrozenPolicy, GrpoConfig, PolicyParams};
use grpolab_core::search::{mcts_refine, Chromosome, MctsConfig};
use grpolab_core::seeding;
use grpolab_core::{CohortConfig, FusionConfig, FusionParams, Matrix, ModalitySeries};
use rand::Rng;

fn random_series(dims: &[usize], t: usize, seed: u64) -> Vec<ModalitySeries> {
    let mut rng = seeding::stream(seed, "bench-series");
    dims.iter()
        .enumerate()
        .map(|(m, &d)| {
            let mut data = Matrix::zeros(t, d);
            for r in 0..t {
                for c in 0..d {
                    data[(r, c)] = rng.gen_range(-1.0..1.0);
                }
            }
            ModalitySeries { modality_id: m, data }
        })
        .collect()
}

fn bench_fusion(c: &mut Criterion) {
    let dims = [3usize, 3, 3];
    let config = FusionConfig::default();
    let params =
        FusionParams::init(&config, &dims, &mut seeding::stream(0, "bench-fusion")).unwrap();
    let series = random_series(&dims, 20, 1);

    c.bench_function("fuse_forward_t20_m3", |b| {
        b.iter(|| params.fuse(black_box(&series)).unwrap())
    });

    let (_, cache) = params.fuse(&series).unwrap();
    let mut rng = seeding::stream(2, "bench-upstream");
    let mut upstream = Matrix::zeros(20, params.fused_dim());
    for r in 0..20 {
        for col in 0..params.fused_dim() {
            upstream[(r, col)] = rng.gen_range(-1.0..1.0);
        }
    }
    c.bench_function("fuse_backward_t20_m3", |b| {
        b.iter(|| params.fuse_backward(black_box(&cache), black_box(&upstream)))
    });
}

fn bench_objective(c: &mut Criterion) {
    let pooled_dim = 24;
    let n_groups = 3;
    let n_actions = 4;
    let mut rng = seeding::stream(3, "bench-objective");
    let policy =
        PolicyParams::new(pooled_dim, n_groups, n_actions, 32, &mut rng).unwrap();
    let frozen = FrozenPolicy(policy.clone());
    let samples: Vec<AdvantageSample> = (0..64)
        .map(|i| AdvantageSample {
            patient_id: i,
            time: i % 20,
            group: i % n_groups,
            action: rng.gen_range(0..n_actions),
            return_to_go: rng.gen_range(-2.0..2.0),
            baseline: rng.gen_range(-1.0..1.0),
            pooled: (0..pooled_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect();
    let batch = AdvantageBatch::build(samples, &AdvantageHyper::default()).unwrap();
    let indices: Vec<usize> = (0..batch.len()).collect();
    let config = GrpoConfig::default();

    c.bench_function("grpo_objective_64", |b| {
        b.iter(|| grpo_objective(&policy, &frozen, black_box(&batch), &indices, &config).unwrap())
    });
}

fn bench_kmeans(c: &mut Criterion) {
    let mut rng = seeding::stream(4, "bench-kmeans");
    let points: Vec<Vec<f64>> =
        (0..64).map(|_| (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
    c.bench_function("kmeans_n64_k3", |b| {
        b.iter(|| kmeans(black_box(&points), 3, 100, 9).unwrap())
    });
}

fn small_cohort() -> CohortConfig {
    CohortConfig {
        n_patients: 4,
        n_latent_groups: 2,
        n_modalities: 2,
        modality_dims: vec![2, 2],
        horizon: 10,
        n_actions: 3,
        state_dim: 4,
        seed: 5,
        ..CohortConfig::default()
    }
}

fn bench_mcts(c: &mut Criterion) {
    let cohort = generate_cohort(&small_cohort()).unwrap();
    let chromosome = Chromosome::new(vec![0; 10]);
    let config = MctsConfig { budget: 200, seed: 6, ..MctsConfig::default() };
    c.bench_function("mcts_refine_budget200", |b| {
        b.iter(|| {
            let mut fallback = |_: &grpolab_core::PatientState| 0usize;
            mcts_refine(black_box(&chromosome), &cohort, 0, &config, &mut fallback).unwrap()
        })
    });
}

fn bench_rollout(c: &mut Criterion) {
    let cohort = generate_cohort(&small_cohort()).unwrap();
    let fusion_config = FusionConfig { hidden: 8, n_heads: 2, kernel_width: 3 };
    let fusion = FusionParams::init(
        &fusion_config,
        &cohort.config.modality_dims,
        &mut seeding::stream(7, "bench-rollout-fusion"),
    )
    .unwrap();
    let policy = PolicyParams::new(
        fusion.fused_dim(),
        2,
        cohort.config.n_actions,
        16,
        &mut seeding::stream(8, "bench-rollout-policy"),
    )
    .unwrap();

    c.bench_function("rollout_t10_full_policy", |b| {
        b.iter(|| {
            let mut policy_fn = |series: &[ModalitySeries], g: usize| {
                let (features, _) = fusion.fuse(series).unwrap();
                policy.action_distribution(&pool_state(&features), g).unwrap()
            };
            let mut rng = seeding::stream(9, "bench-rollout");
            cohort.rollout(0, 0, &mut policy_fn, black_box(0), &mut rng).unwrap()
        })
    });
}

criterion_group!(benches, bench_fusion, bench_objective, bench_kmeans, bench_mcts, bench_rollout);
criterion_main!(benches);
