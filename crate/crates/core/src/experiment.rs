//! Seeded experiment orchestration: config loading, the train and search
//! pipelines, ablations, gradient checks, and artifact persistence.
//!
//! One master seed drives everything. Each module draws from its own stream
//! derived by hashing the master seed with a module label, so adding draws
//! in one module never shifts another module's randomness. All artifacts are
//! plain JSON or CSV; rerunning a command with the same config and seed
//! reproduces them byte for byte, except for the `wall_ms` column of
//! `metrics.csv`, which records real elapsed time.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::advantage::{AdvantageBatch, AdvantageHyper, AdvantageSample, ValueParams};
use crate::cluster::{embed_cohort, kmeans, GroupAssignment};
use crate::env::{generate_cohort, Cohort, CohortConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionParams, ModalitySeries};
use crate::grpo::{
    grpo_objective, ppo_objective, train, FrozenPolicy, GrpoConfig, IterationStats, PolicyParams,
};
use crate::nn::{gradient_check, Activation, Matrix, Mlp};
use crate::search::{
    fitness, ga_search, mcts_refine, select_best, Chromosome, GaConfig, GenerationStats,
    MctsConfig, RefineResult,
};
use crate::seeding::{split_seed, split_seed_indexed, stream, stream_indexed};

/// Patient embedding and grouping settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub n_groups: usize,
    pub embed_dim: usize,
    pub max_iters: usize,
    pub phi_hidden: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { n_groups: 3, embed_dim: 4, max_iters: 100, phi_hidden: 8 }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_groups", self.n_groups),
            ("embed_dim", self.embed_dim),
            ("max_iters", self.max_iters),
            ("phi_hidden", self.phi_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("cluster {name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run_label: String,
    pub master_seed: u64,
    pub out_dir: String,
    pub cohort: CohortConfig,
    pub fusion: FusionConfig,
    pub cluster: ClusterConfig,
    pub grpo: GrpoConfig,
    pub ga: GaConfig,
    pub mcts: MctsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_label: "run".into(),
            master_seed: 0,
            out_dir: "out".into(),
            cohort: CohortConfig::default(),
            fusion: FusionConfig::default(),
            cluster: ClusterConfig::default(),
            grpo: GrpoConfig::default(),
            ga: GaConfig::default(),
            mcts: MctsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads and validates a JSON config. Parse failures carry the file path
    /// and the line and column of the offending token.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!(
                "{}:{}:{}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.fusion.validate()?;
        self.cluster.validate()?;
        self.grpo.validate()?;
        self.ga.validate()?;
        self.mcts.validate()?;
        if self.run_label.is_empty() {
            return Err(Error::Config("run_label must not be empty".into()));
        }
        if self.out_dir.is_empty() {
            return Err(Error::Config("out_dir must not be empty".into()));
        }
        Ok(())
    }

    /// The config as actually run: the cohort seed is replaced by its
    /// master-derived stream so the checkpoint can regenerate the cohort.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut c = self.clone();
        c.cohort.seed = split_seed(self.master_seed, "cohort");
        c
    }
}

/// Everything needed to resume or audit a training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub run_label: String,
    pub master_seed: u64,
    pub config: ExperimentConfig,
    pub phi: Mlp,
    pub fusion: FusionParams,
    pub assignment: GroupAssignment,
    pub policy: PolicyParams,
    pub value: ValueParams,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &format!("{}\n", serde_json::to_string_pretty(self)?))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One metrics.csv row. `group_returns` and `group_kl` are indexed by group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub mean_return: f64,
    pub group_returns: Vec<f64>,
    pub group_kl: Vec<f64>,
    pub objective: f64,
    pub fairness_gap: f64,
    pub wall_ms: u128,
}

impl MetricsRow {
    pub fn from_stats(stats: &IterationStats, n_groups: usize) -> MetricsRow {
        let group_returns: Vec<f64> =
            (0..n_groups).map(|g| stats.group_returns.get(&g).copied().unwrap_or(0.0)).collect();
        let group_kl: Vec<f64> =
            (0..n_groups).map(|g| stats.group_kl.get(&g).copied().unwrap_or(0.0)).collect();
        MetricsRow {
            iteration: stats.iteration,
            mean_return: stats.mean_return,
            fairness_gap: fairness_gap(&group_returns),
            group_returns,
            group_kl,
            objective: stats.objective,
            wall_ms: stats.wall_ms,
        }
    }

    fn csv_line(&self) -> String {
        let mut fields = vec![self.iteration.to_string(), self.mean_return.to_string()];
        fields.extend(self.group_returns.iter().map(|v| v.to_string()));
        fields.extend(self.group_kl.iter().map(|v| v.to_string()));
        fields.push(self.objective.to_string());
        fields.push(self.fairness_gap.to_string());
        fields.push(self.wall_ms.to_string());
        fields.join(",")
    }
}

/// Spread between the best- and worst-off group this iteration.
pub fn fairness_gap(group_returns: &[f64]) -> f64 {
    let max = group_returns.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let min = group_returns.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if group_returns.is_empty() { 0.0 } else { max - min }
}

pub fn metrics_header(n_groups: usize) -> String {
    let mut cols = vec!["iteration".to_string(), "mean_return".to_string()];
    cols.extend((1..=n_groups).map(|g| format!("ret_g{g}")));
    cols.extend((1..=n_groups).map(|g| format!("kl_g{g}")));
    cols.push("objective".into());
    cols.push("fairness_gap".into());
    cols.push("wall_ms".into());
    cols.join(",")
}

pub fn metrics_csv(log: &[IterationStats], n_groups: usize) -> String {
    let mut out = metrics_header(n_groups);
    out.push('\n');
    for stats in log {
        out.push_str(&MetricsRow::from_stats(stats, n_groups).csv_line());
        out.push('\n');
    }
    out
}

/// Drops the final (wall_ms) column from every line, for comparing reruns.
pub fn strip_wall_ms(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rfind(',') {
            Some(pos) => &line[..pos],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub final_mean_return: Option<f64>,
    pub iterations: usize,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Builds the cohort, embedding, grouping, and fusion encoder from the
/// master seed. Shared by training, search, and the ablations so every
/// command sees the same world for the same config.
fn build_world(config: &ExperimentConfig) -> Result<(Cohort, Mlp, GroupAssignment, FusionParams)> {
    let effective = config.resolved();
    let cohort = generate_cohort(&effective.cohort)?;
    // The embedding stays frozen, so a random linear projection is enough to
    // carry the feature geometry into the clustering space.
    let phi = Mlp::new(
        &[effective.cohort.feature_dim, config.cluster.phi_hidden, config.cluster.embed_dim],
        Activation::Identity,
        Activation::Identity,
        &mut stream(config.master_seed, "phi"),
    );
    let points: Vec<Vec<f64>> =
        embed_cohort(&phi, &cohort)?.into_iter().map(|e| e.vector).collect();
    let assignment = kmeans(
        &points,
        config.cluster.n_groups,
        config.cluster.max_iters,
        split_seed(config.master_seed, "kmeans"),
    )?;
    let fusion = FusionParams::init(
        &config.fusion,
        &effective.cohort.modality_dims,
        &mut stream(config.master_seed, "fusion"),
    )?;
    Ok((cohort, phi, assignment, fusion))
}

/// Full training pipeline: cohort -> embed -> cluster -> GRPO. Writes
/// metrics.csv, checkpoint.json, cohort.json, and assignment.json under the
/// configured output directory.
pub fn run_train(config: &ExperimentConfig, workers: usize) -> Result<TrainArtifacts> {
    config.validate()?;
    let (cohort, phi, assignment, fusion) = build_world(config)?;
    let output = train(
        &cohort,
        &assignment,
        &fusion,
        &config.grpo,
        split_seed(config.master_seed, "train"),
        workers,
    )?;

    let out_dir = PathBuf::from(&config.out_dir);
    let metrics_path = out_dir.join("metrics.csv");
    write_text(&metrics_path, &metrics_csv(&output.log, assignment.n_groups))?;
    write_text(&out_dir.join("cohort.json"), &format!("{}\n", cohort.to_json()?))?;
    write_text(&out_dir.join("assignment.json"), &format!("{}\n", assignment.to_json()?))?;
    let checkpoint = Checkpoint {
        run_label: config.run_label.clone(),
        master_seed: config.master_seed,
        config: config.resolved(),
        phi,
        fusion,
        assignment,
        policy: output.policy,
        value: output.value,
    };
    let checkpoint_path = out_dir.join("checkpoint.json");
    checkpoint.save(&checkpoint_path)?;

    Ok(TrainArtifacts {
        final_mean_return: output.log.last().map(|s| s.mean_return),
        iterations: output.log.len(),
        metrics_path,
        checkpoint_path,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub actions: Vec<usize>,
    pub ga_fitness: f64,
    pub mcts_estimate: f64,
    pub refined_actions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub run_label: String,
    pub master_seed: u64,
    pub patient_id: usize,
    pub candidates: Vec<CandidateReport>,
    pub selected_index: usize,
    pub selected_actions: Vec<usize>,
    pub selected_estimate: f64,
    pub per_generation: Vec<GenerationStats>,
}

fn check_search_compat(current: &ExperimentConfig, checkpoint: &Checkpoint) -> Result<()> {
    let mut a = current.resolved().cohort;
    let mut b = checkpoint.config.cohort.clone();
    a.seed = 0;
    b.seed = 0;
    if a != b {
        return Err(Error::Config(
            "cohort configuration differs from the checkpoint's; the checkpoint's groups and \
             policy describe a different cohort"
                .into(),
        ));
    }
    if current.fusion != checkpoint.config.fusion {
        return Err(Error::Config(
            "fusion configuration differs from the checkpoint's".into(),
        ));
    }
    if current.cluster.n_groups != checkpoint.config.cluster.n_groups {
        return Err(Error::Config(format!(
            "config wants {} groups, checkpoint was trained with {}",
            current.cluster.n_groups, checkpoint.config.cluster.n_groups
        )));
    }
    Ok(())
}

/// GA global search plus MCTS refinement for one patient, anchored to the
/// checkpoint's cohort. Writes search_report.json.
pub fn run_search(
    config: &ExperimentConfig,
    checkpoint_path: &Path,
    patient_id: usize,
) -> Result<SearchReport> {
    config.validate()?;
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    check_search_compat(config, &checkpoint)?;
    let cohort = generate_cohort(&checkpoint.config.cohort)?;
    if patient_id >= cohort.config.n_patients {
        return Err(Error::Usage(format!(
            "patient {patient_id} out of range, cohort has {}",
            cohort.config.n_patients
        )));
    }

    let master = config.master_seed;
    let discount = cohort.config.discount;
    let mut ga_config = config.ga.clone();
    ga_config.seed = split_seed_indexed(master, "ga", &[patient_id as u64]);
    let rollouts = ga_config.fitness_rollouts;
    let mut eval_rng = stream_indexed(master, "ga-eval", &[patient_id as u64]);
    let mut eval = |c: &Chromosome| {
        let mut copy = c.clone();
        fitness(&mut copy, &cohort, patient_id, discount, rollouts, &mut eval_rng)
    };
    let outcome = ga_search(
        &ga_config,
        cohort.config.horizon,
        cohort.config.n_actions,
        &mut eval,
    )?;

    // Full-length chromosomes never exhaust their genes, so the fallback
    // action is inert; the no-op keeps the contract total.
    let mut fallback = |_: &crate::env::PatientState| 0usize;
    let mut results: Vec<RefineResult> = Vec::with_capacity(outcome.hall.len());
    for (k, candidate) in outcome.hall.iter().enumerate() {
        let mut mcts_config = config.mcts.clone();
        mcts_config.seed = split_seed_indexed(master, "mcts", &[patient_id as u64, k as u64]);
        results.push(mcts_refine(candidate, &cohort, patient_id, &mcts_config, &mut fallback)?);
    }
    let selected_index = select_best(&results)?;

    let report = SearchReport {
        run_label: config.run_label.clone(),
        master_seed: master,
        patient_id,
        candidates: outcome
            .hall
            .iter()
            .zip(&results)
            .map(|(c, r)| CandidateReport {
                actions: c.actions.clone(),
                ga_fitness: c.cached_fitness.expect("hall members carry fitness"),
                mcts_estimate: r.estimate,
                refined_actions: r.actions.clone(),
            })
            .collect(),
        selected_index,
        selected_actions: results[selected_index].actions.clone(),
        selected_estimate: results[selected_index].estimate,
        per_generation: outcome.per_generation,
    };
    write_text(
        &PathBuf::from(&config.out_dir).join("search_report.json"),
        &format!("{}\n", serde_json::to_string_pretty(&report)?),
    )?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub enum AblateSummary {
    PpoReduction { max_discrepancy: f64, csv_path: PathBuf },
    FairnessSweep { rows: Vec<FairnessRow>, csv_path: PathBuf },
}

#[derive(Clone, Debug)]
pub struct FairnessRow {
    pub alpha3: f64,
    pub gaps: Vec<f64>,
    pub mean_gap: f64,
}

fn perturbed_policy(policy: &PolicyParams, scale: f64, rng: &mut rand_chacha::ChaCha8Rng) -> PolicyParams {
    let mut other = policy.clone();
    let flat: Vec<f64> = policy
        .flatten()
        .iter()
        .map(|v| v + scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    other.assign_flat(&flat);
    other
}

fn synthetic_reduction_batch(
    pooled_dim: usize,
    n_groups: usize,
    n_actions: usize,
    hyper: &AdvantageHyper,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<AdvantageBatch> {
    let samples: Vec<AdvantageSample> = (0..24)
        .map(|i| AdvantageSample {
            patient_id: i,
            time: i % 5,
            group: i % n_groups,
            action: rng.gen_range(0..n_actions),
            return_to_go: rng.gen_range(-3.0..3.0),
            baseline: rng.gen_range(-1.0..1.0),
            pooled: (0..pooled_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect();
    AdvantageBatch::build(samples, hyper)
}

/// `ppo_reduction`: degenerate the group terms and compare grpo_objective
/// against the independently written PPO objective on seeded batches.
/// `fairness_sweep`: paired training runs across alpha3 settings, reporting
/// the final fairness gap per seed.
pub fn run_ablate(config: &ExperimentConfig, mode: &str, workers: usize) -> Result<AblateSummary> {
    config.validate()?;
    match mode {
        "ppo_reduction" => {
            let reduction = GrpoConfig {
                kl_weight: 0.0,
                normalize_advantages: false,
                advantage: AdvantageHyper { alpha1: 1.0, alpha2: 0.0, alpha3: 0.0, beta: 2.0 },
                ..config.grpo.clone()
            };
            let pooled_dim = config.cohort.n_modalities * config.fusion.hidden;
            let n_groups = config.cluster.n_groups;
            let n_actions = config.cohort.n_actions;
            let mut csv = String::from("batch,grpo_objective,ppo_objective,abs_diff\n");
            let mut max_discrepancy = 0.0_f64;
            for batch_idx in 0..100u64 {
                let mut rng = stream_indexed(config.master_seed, "ppo-reduction", &[batch_idx]);
                let seed = rng.gen::<u64>();
                let policy = PolicyParams::new(
                    pooled_dim,
                    n_groups,
                    n_actions,
                    config.grpo.trunk_hidden,
                    &mut stream(seed, "ablate-policy"),
                )?;
                let frozen = FrozenPolicy(perturbed_policy(&policy, 0.1, &mut rng));
                let batch = synthetic_reduction_batch(
                    pooled_dim,
                    n_groups,
                    n_actions,
                    &reduction.advantage,
                    &mut rng,
                )?;
                let all: Vec<usize> = (0..batch.len()).collect();
                let (grpo_value, _) = grpo_objective(&policy, &frozen, &batch, &all, &reduction)?;
                let ppo_value =
                    ppo_objective(&policy, &frozen, &batch, &all, reduction.clip_epsilon)?;
                let diff = (grpo_value - ppo_value).abs();
                max_discrepancy = max_discrepancy.max(diff);
                csv.push_str(&format!("{batch_idx},{grpo_value},{ppo_value},{diff}\n"));
            }
            let csv_path = PathBuf::from(&config.out_dir).join("ablate_ppo_reduction.csv");
            write_text(&csv_path, &csv)?;
            Ok(AblateSummary::PpoReduction { max_discrepancy, csv_path })
        }
        "fairness_sweep" => {
            if config.grpo.iterations == 0 {
                return Err(Error::Config(
                    "fairness_sweep needs grpo.iterations >= 1 to measure a final gap".into(),
                ));
            }
            let (cohort, _, assignment, fusion) = build_world(config)?;
            let seeds: Vec<u64> = (0..5)
                .map(|i| split_seed_indexed(config.master_seed, "fairness-seed", &[i]))
                .collect();
            let mut rows = Vec::new();
            for &alpha3 in &[0.0, 0.1, 0.5] {
                let mut grpo_config = config.grpo.clone();
                grpo_config.advantage.alpha3 = alpha3;
                let mut gaps = Vec::with_capacity(seeds.len());
                for &seed in &seeds {
                    let output =
                        train(&cohort, &assignment, &fusion, &grpo_config, seed, workers)?;
                    let last = output.log.last().expect("iterations >= 1 was validated");
                    let row = MetricsRow::from_stats(last, assignment.n_groups);
                    gaps.push(row.fairness_gap);
                }
                let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
                rows.push(FairnessRow { alpha3, gaps, mean_gap });
            }
            let mut csv =
                String::from("alpha3,gap_seed1,gap_seed2,gap_seed3,gap_seed4,gap_seed5,mean_gap\n");
            for row in &rows {
                csv.push_str(&format!(
                    "{},{},{}\n",
                    row.alpha3,
                    row.gaps.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(","),
                    row.mean_gap
                ));
            }
            let csv_path = PathBuf::from(&config.out_dir).join("ablate_fairness_sweep.csv");
            write_text(&csv_path, &csv)?;
            Ok(AblateSummary::FairnessSweep { rows, csv_path })
        }
        other => Err(Error::Usage(format!(
            "unknown ablate mode '{other}'; available modes: ppo_reduction, fairness_sweep"
        ))),
    }
}

#[derive(Clone, Debug)]
pub struct ModuleCheck {
    pub module: &'static str,
    pub max_rel_error: f64,
    pub pass: bool,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn corrupt_if(analytic: &mut [f64], module: &'static str, corrupt: Option<&str>) {
    if corrupt == Some(module) {
        analytic[0] += 0.5;
    }
}

/// Finite-difference audits of the three analytic gradient routes. The
/// `corrupt` hook deliberately damages one module's analytic gradient so the
/// detector itself can be tested.
pub fn run_gradcheck(config: &ExperimentConfig, corrupt: Option<&str>) -> Result<Vec<ModuleCheck>> {
    config.validate()?;
    if let Some(name) = corrupt {
        if !["fusion_encoder", "policy_objective", "value_loss"].contains(&name) {
            return Err(Error::Usage(format!(
                "unknown gradcheck module '{name}'; available: fusion_encoder, policy_objective, value_loss"
            )));
        }
    }
    let master = config.master_seed;
    let mut checks = Vec::new();

    let mut fusion_worst = 0.0_f64;
    for point in 0..3u64 {
        let mut rng = stream_indexed(master, "gradcheck-fusion", &[point]);
        let dims = &config.cohort.modality_dims;
        let params = FusionParams::init(&config.fusion, dims, &mut rng)?;
        let t = 5;
        let series: Vec<ModalitySeries> = dims
            .iter()
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
            .collect();
        let mut upstream = Matrix::zeros(t, params.fused_dim());
        for r in 0..t {
            for c in 0..params.fused_dim() {
                upstream[(r, c)] = rng.gen_range(-1.0..1.0);
            }
        }
        let (_, cache) = params.fuse(&series)?;
        let mut analytic = params.fuse_backward(&cache, &upstream).flatten();
        corrupt_if(&mut analytic, "fusion_encoder", corrupt);
        let probe = params.clone();
        let series2 = series.clone();
        let upstream2 = upstream.clone();
        let report = gradient_check(
            move |theta| {
                let mut p = probe.clone();
                p.assign_flat(theta);
                let (features, _) = p.fuse(&series2).unwrap();
                let mut total = 0.0;
                for r in 0..features.fused.rows() {
                    for c in 0..features.fused.cols() {
                        total += upstream2[(r, c)] * features.fused[(r, c)];
                    }
                }
                total
            },
            &params.flatten(),
            &analytic,
            1e-5,
        )?;
        fusion_worst = fusion_worst.max(report.max_rel_error);
    }
    checks.push(ModuleCheck {
        module: "fusion_encoder",
        max_rel_error: fusion_worst,
        pass: fusion_worst < GRADCHECK_TOLERANCE,
    });

    let mut policy_worst = 0.0_f64;
    let pooled_dim = config.cohort.n_modalities * config.fusion.hidden;
    for point in 0..3u64 {
        let mut rng = stream_indexed(master, "gradcheck-policy", &[point]);
        let seed = rng.gen::<u64>();
        let policy = PolicyParams::new(
            pooled_dim,
            config.cluster.n_groups,
            config.cohort.n_actions,
            config.grpo.trunk_hidden,
            &mut stream(seed, "gradcheck-policy-init"),
        )?;
        let frozen = FrozenPolicy(perturbed_policy(&policy, 0.02, &mut rng));
        let batch = synthetic_reduction_batch(
            pooled_dim,
            config.cluster.n_groups,
            config.cohort.n_actions,
            &config.grpo.advantage,
            &mut rng,
        )?;
        let all: Vec<usize> = (0..batch.len()).collect();
        let grpo_config = config.grpo.clone();
        let (_, grads) = grpo_objective(&policy, &frozen, &batch, &all, &grpo_config)?;
        let mut analytic = grads.flatten();
        corrupt_if(&mut analytic, "policy_objective", corrupt);
        let probe = policy.clone();
        let report = gradient_check(
            move |theta| {
                let mut p = probe.clone();
                p.assign_flat(theta);
                grpo_objective(&p, &frozen, &batch, &all, &grpo_config).unwrap().0
            },
            &policy.flatten(),
            &analytic,
            1e-5,
        )?;
        policy_worst = policy_worst.max(report.max_rel_error);
    }
    checks.push(ModuleCheck {
        module: "policy_objective",
        max_rel_error: policy_worst,
        pass: policy_worst < GRADCHECK_TOLERANCE,
    });

    let mut value_worst = 0.0_f64;
    for point in 0..3u64 {
        let mut rng = stream_indexed(master, "gradcheck-value", &[point]);
        let seed = rng.gen::<u64>();
        let value = ValueParams::new(
            pooled_dim,
            config.cluster.n_groups,
            config.grpo.value_hidden,
            &mut stream(seed, "gradcheck-value-init"),
        )?;
        let n = 8;
        let pooled: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..pooled_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let groups: Vec<usize> = (0..n).map(|i| i % config.cluster.n_groups).collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (_, grads) = value.loss_and_grads(&pooled, &groups, &targets)?;
        let mut analytic = grads.flatten();
        corrupt_if(&mut analytic, "value_loss", corrupt);
        let probe = value.clone();
        let report = gradient_check(
            move |theta| {
                let mut v = probe.clone();
                v.net.assign_flat(theta);
                v.loss_and_grads(&pooled, &groups, &targets).unwrap().0
            },
            &value.net.flatten(),
            &analytic,
            1e-5,
        )?;
        value_worst = value_worst.max(report.max_rel_error);
    }
    checks.push(ModuleCheck {
        module: "value_loss",
        max_rel_error: value_worst,
        pass: value_worst < GRADCHECK_TOLERANCE,
    });

    Ok(checks)
}
