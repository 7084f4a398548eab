//! Group-relative policy optimization.
//!
//! The policy maps pooled fused features plus a per-group logit bias to a
//! distribution over actions. Each training iteration freezes the current
//! policy, rolls out every patient under it, shapes advantages with the
//! group-relative form, then ascends the clipped surrogate
//!
//! ```text
//! J = mean_i min(rho_i * A_i, clip(rho_i, 1 - eps, 1 + eps) * A_i)
//!     - kl_weight * sum_g KL(pi_frozen^g || pi^g)
//! ```
//!
//! where `rho_i` is the probability ratio of the taken action under the new
//! versus the frozen policy, computed in log space, and the KL term averages
//! over each group's batch states separately before summing, so small groups
//! restrain the update as strongly as large ones. The KL direction is from
//! the frozen policy toward the new one.
//!
//! Gradients here are exact, not autodiff: the clipped branch contributes
//! `A * rho * (onehot(a) - pi)` through the logits when the unclipped term
//! attains the min and nothing otherwise, and the KL term contributes
//! `(pi - pi_frozen)` scaled by the group weight.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::{
    discounted_returns, AdvantageBatch, AdvantageHyper, AdvantageSample, ValueParams,
};
use crate::cluster::GroupAssignment;
use crate::env::Cohort;
use crate::error::{Error, Result};
use crate::fusion::{pool_state, FusionParams, ModalitySeries};
use crate::nn::{
    adam_step, log_softmax_row, AdamParams, AdamState, Activation, Matrix, Mlp, MlpGrads,
};
use crate::seeding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub clip_epsilon: f64,
    pub kl_weight: f64,
    pub advantage: AdvantageHyper,
    pub step_size: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub iterations: usize,
    pub rollouts_per_patient: usize,
    pub normalize_advantages: bool,
    pub trunk_hidden: usize,
    pub value_hidden: usize,
    pub value_epochs: usize,
    pub value_step: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            clip_epsilon: 0.2,
            kl_weight: 0.01,
            advantage: AdvantageHyper::default(),
            step_size: 3e-3,
            epochs: 4,
            minibatch_size: 64,
            iterations: 150,
            rollouts_per_patient: 1,
            normalize_advantages: true,
            trunk_hidden: 32,
            value_hidden: 32,
            value_epochs: 40,
            value_step: 0.05,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Config(format!(
                "clip_epsilon must lie in (0, 1), got {}",
                self.clip_epsilon
            )));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::Config(format!(
                "kl_weight must be non-negative, got {}",
                self.kl_weight
            )));
        }
        self.advantage.validate()?;
        for (name, v) in [("step_size", self.step_size), ("value_step", self.value_step)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("minibatch_size", self.minibatch_size),
            ("rollouts_per_patient", self.rollouts_per_patient),
            ("trunk_hidden", self.trunk_hidden),
            ("value_hidden", self.value_hidden),
            ("value_epochs", self.value_epochs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Policy network: a trunk over pooled fused features producing action
/// logits, plus one learned bias row per group added before the softmax.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyParams {
    pub trunk: Mlp,
    pub group_bias: Matrix,
}

impl PolicyParams {
    /// Xavier trunk, zero group bias, so all groups start with one shared
    /// policy.
    pub fn new(
        pooled_dim: usize,
        n_groups: usize,
        n_actions: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<PolicyParams> {
        if pooled_dim == 0 || n_groups == 0 || n_actions < 2 || hidden == 0 {
            return Err(Error::Config(format!(
                "policy needs pooled_dim >= 1, n_groups >= 1, n_actions >= 2, hidden >= 1; \
                 got {pooled_dim}, {n_groups}, {n_actions}, {hidden}"
            )));
        }
        Ok(PolicyParams {
            trunk: Mlp::new(&[pooled_dim, hidden, n_actions], Activation::Tanh, Activation::Identity, rng),
            group_bias: Matrix::zeros(n_groups, n_actions),
        })
    }

    pub fn pooled_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn n_groups(&self) -> usize {
        self.group_bias.rows()
    }

    pub fn n_actions(&self) -> usize {
        self.group_bias.cols()
    }

    pub fn logits(&self, pooled: &[f64], group: usize) -> Result<Vec<f64>> {
        if pooled.len() != self.pooled_dim() {
            return Err(Error::Usage(format!(
                "policy input has length {}, expected {}",
                pooled.len(),
                self.pooled_dim()
            )));
        }
        if group >= self.n_groups() {
            return Err(Error::Usage(format!(
                "policy group {group} out of range for {} groups",
                self.n_groups()
            )));
        }
        let mut z = self.trunk.forward_row(pooled);
        for (zi, &b) in z.iter_mut().zip(self.group_bias.row(group)) {
            *zi += b;
        }
        Ok(z)
    }

    pub fn action_distribution(&self, pooled: &[f64], group: usize) -> Result<Vec<f64>> {
        Ok(crate::nn::softmax_row(&self.logits(pooled, group)?))
    }

    pub fn log_action_distribution(&self, pooled: &[f64], group: usize) -> Result<Vec<f64>> {
        Ok(log_softmax_row(&self.logits(pooled, group)?))
    }

    pub fn freeze(&self) -> FrozenPolicy {
        FrozenPolicy(self.clone())
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.group_bias.data().len()
    }

    /// Trunk parameters first (layer by layer, weights then bias), then the
    /// group bias row-major. [`PolicyGrads::flatten`] matches this order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = self.trunk.flatten();
        flat.extend_from_slice(self.group_bias.data());
        flat
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let trunk_len = self.trunk.param_count();
        assert_eq!(
            flat.len(),
            trunk_len + self.group_bias.data().len(),
            "flat parameter vector sized for a different policy"
        );
        self.trunk.assign_flat(&flat[..trunk_len]);
        self.group_bias.data_mut().copy_from_slice(&flat[trunk_len..]);
    }

    pub fn is_finite(&self) -> bool {
        self.trunk.is_finite() && self.group_bias.is_finite()
    }
}

/// Snapshot of the policy taken at the start of an iteration; the ratio and
/// KL terms are measured against it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrozenPolicy(pub PolicyParams);

impl FrozenPolicy {
    pub fn action_distribution(&self, pooled: &[f64], group: usize) -> Result<Vec<f64>> {
        self.0.action_distribution(pooled, group)
    }

    pub fn log_action_distribution(&self, pooled: &[f64], group: usize) -> Result<Vec<f64>> {
        self.0.log_action_distribution(pooled, group)
    }
}

#[derive(Clone, Debug)]
pub struct PolicyGrads {
    pub trunk: MlpGrads,
    pub group_bias: Matrix,
}

impl PolicyGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = self.trunk.flatten();
        flat.extend_from_slice(self.group_bias.data());
        flat
    }
}

/// Ratio of new to old probability for one action, in log space. The two
/// inputs are log probabilities.
pub fn probability_ratio(log_p_new: f64, log_p_old: f64) -> f64 {
    (log_p_new - log_p_old).exp()
}

/// The pessimistic clipped term `min(rho * A, clip(rho) * A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    unclipped.min(clipped)
}

fn check_indices(batch: &AdvantageBatch, indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::Usage("objective needs at least one batch index".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= batch.len()) {
        return Err(Error::Usage(format!(
            "batch index {bad} out of range for {} rows",
            batch.len()
        )));
    }
    Ok(())
}

/// Per-group KL divergence from the frozen policy to the current one,
/// averaged over each group's states among `indices`.
pub fn group_kl(
    policy: &PolicyParams,
    frozen: &FrozenPolicy,
    batch: &AdvantageBatch,
    indices: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    check_indices(batch, indices)?;
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &i in indices {
        let row = &batch.rows[i];
        let lp_old = frozen.log_action_distribution(&batch.pooled[i], row.group)?;
        let lp_new = policy.log_action_distribution(&batch.pooled[i], row.group)?;
        let kl: f64 = lp_old
            .iter()
            .zip(&lp_new)
            .map(|(&lo, &ln)| lo.exp() * (lo - ln))
            .sum();
        let entry = sums.entry(row.group).or_insert((0.0, 0));
        entry.0 += kl;
        entry.1 += 1;
    }
    Ok(sums.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect())
}

/// Objective value and its exact gradient over the selected batch rows.
pub fn grpo_objective(
    policy: &PolicyParams,
    frozen: &FrozenPolicy,
    batch: &AdvantageBatch,
    indices: &[usize],
    config: &GrpoConfig,
) -> Result<(f64, PolicyGrads)> {
    check_indices(batch, indices)?;
    let n_actions = policy.n_actions();
    let n = indices.len();

    let mut group_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &i in indices {
        *group_counts.entry(batch.rows[i].group).or_insert(0) += 1;
    }

    let rows: Vec<Vec<f64>> = indices.iter().map(|&i| batch.pooled[i].clone()).collect();
    let inputs = Matrix::from_rows(&rows)?;
    let (trunk_out, cache) = policy.trunk.forward(&inputs);

    let mut surrogate = 0.0;
    let mut kl_sums: BTreeMap<usize, f64> = BTreeMap::new();
    let mut upstream = Matrix::zeros(n, n_actions);
    let mut bias_grads = Matrix::zeros(policy.n_groups(), n_actions);

    for (local, &i) in indices.iter().enumerate() {
        let row = &batch.rows[i];
        if row.action >= n_actions {
            return Err(Error::Usage(format!(
                "batch row {i} has action {} but the policy knows {n_actions}",
                row.action
            )));
        }
        if row.group >= policy.n_groups() {
            return Err(Error::Usage(format!(
                "batch row {i} has group {} but the policy knows {}",
                row.group,
                policy.n_groups()
            )));
        }
        let mut logits = trunk_out.row(local).to_vec();
        for (z, &b) in logits.iter_mut().zip(policy.group_bias.row(row.group)) {
            *z += b;
        }
        let lp_new = log_softmax_row(&logits);
        let lp_old = frozen.log_action_distribution(&batch.pooled[i], row.group)?;
        let p_new: Vec<f64> = lp_new.iter().map(|l| l.exp()).collect();
        let p_old: Vec<f64> = lp_old.iter().map(|l| l.exp()).collect();

        let ratio = probability_ratio(lp_new[row.action], lp_old[row.action]);
        let adv = if config.normalize_advantages { row.normalized } else { row.relative };
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon) * adv;
        surrogate += unclipped.min(clipped);

        let kl: f64 = p_old
            .iter()
            .zip(lp_old.iter().zip(&lp_new))
            .map(|(&po, (&lo, &ln))| po * (lo - ln))
            .sum();
        *kl_sums.entry(row.group).or_insert(0.0) += kl;

        let group_weight = group_counts[&row.group] as f64;
        let surrogate_active = unclipped <= clipped;
        for a in 0..n_actions {
            let onehot = if a == row.action { 1.0 } else { 0.0 };
            let mut d = 0.0;
            if surrogate_active {
                d += adv * ratio * (onehot - p_new[a]) / n as f64;
            }
            d -= config.kl_weight * (p_new[a] - p_old[a]) / group_weight;
            upstream[(local, a)] = d;
            bias_grads[(row.group, a)] += d;
        }
    }

    let kl_total: f64 = kl_sums
        .iter()
        .map(|(g, s)| s / group_counts[g] as f64)
        .sum();
    let objective = surrogate / n as f64 - config.kl_weight * kl_total;

    let (trunk_grads, _) = policy.trunk.backward(&cache, &upstream);
    Ok((objective, PolicyGrads { trunk: trunk_grads, group_bias: bias_grads }))
}

/// Plain PPO objective over the same rows, written as its own route: ratios
/// by direct probability division, the raw individual advantage, no group
/// terms and no KL penalty.
pub fn ppo_objective(
    policy: &PolicyParams,
    frozen: &FrozenPolicy,
    batch: &AdvantageBatch,
    indices: &[usize],
    clip_epsilon: f64,
) -> Result<f64> {
    check_indices(batch, indices)?;
    let mut total = 0.0;
    for &i in indices {
        let row = &batch.rows[i];
        let p_new = policy.action_distribution(&batch.pooled[i], row.group)?;
        let p_old = frozen.action_distribution(&batch.pooled[i], row.group)?;
        let ratio = p_new[row.action] / p_old[row.action];
        let unclipped = ratio * row.individual;
        let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * row.individual;
        total += unclipped.min(clipped);
    }
    Ok(total / indices.len() as f64)
}

/// Parameter magnitude treated as divergence. A saturating trunk keeps
/// runaway parameters finite, so a finiteness check alone never fires.
pub const PARAM_CAP: f64 = 1e12;

/// One logged training iteration. `wall_ms` is the only field that varies
/// between reruns of the same seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub mean_return: f64,
    pub group_returns: BTreeMap<usize, f64>,
    pub group_kl: BTreeMap<usize, f64>,
    pub objective: f64,
    pub wall_ms: u128,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub policy: PolicyParams,
    pub value: ValueParams,
    pub log: Vec<IterationStats>,
    pub final_batch: Option<AdvantageBatch>,
}

struct EpisodeData {
    patient_id: usize,
    group: usize,
    pooled: Vec<Vec<f64>>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
}

fn run_episode(
    cohort: &Cohort,
    fusion: &FusionParams,
    frozen: &FrozenPolicy,
    patient_id: usize,
    group: usize,
    episode: u64,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeData> {
    let mut pooled_states: Vec<Vec<f64>> = Vec::with_capacity(cohort.config.horizon);
    let mut inner_error: Option<Error> = None;
    let n_actions = cohort.config.n_actions;
    let mut policy_fn = |series: &[ModalitySeries], g: usize| -> Vec<f64> {
        let attempt = fusion
            .fuse(series)
            .and_then(|(features, _)| {
                let pooled = pool_state(&features);
                let dist = frozen.action_distribution(&pooled, g)?;
                pooled_states.push(pooled);
                Ok(dist)
            });
        match attempt {
            Ok(dist) => dist,
            Err(e) => {
                if inner_error.is_none() {
                    inner_error = Some(e);
                }
                vec![1.0 / n_actions as f64; n_actions]
            }
        }
    };
    let trajectory = cohort.rollout(patient_id, group, &mut policy_fn, episode, rng)?;
    if let Some(e) = inner_error {
        return Err(e);
    }
    let actions: Vec<usize> = trajectory.steps.iter().map(|s| s.action).collect();
    let rewards = trajectory.rewards();
    Ok(EpisodeData { patient_id, group, pooled: pooled_states, actions, rewards })
}

/// Runs the full training loop against a cohort. Fusion parameters stay
/// fixed; only the policy trunk, group bias, and value baseline learn.
///
/// Every random draw comes from a stream derived from `seed`, one per
/// episode, so results are identical for any `workers` count; `workers > 1`
/// only spreads rollouts across threads.
pub fn train(
    cohort: &Cohort,
    assignment: &GroupAssignment,
    fusion: &FusionParams,
    config: &GrpoConfig,
    seed: u64,
    workers: usize,
) -> Result<TrainOutput> {
    config.validate()?;
    if assignment.labels.len() != cohort.config.n_patients {
        return Err(Error::Usage(format!(
            "assignment covers {} patients, cohort has {}",
            assignment.labels.len(),
            cohort.config.n_patients
        )));
    }
    if workers == 0 {
        return Err(Error::Usage("workers must be at least 1".into()));
    }

    let pooled_dim = fusion.fused_dim();
    let n_groups = assignment.n_groups;
    let mut policy = PolicyParams::new(
        pooled_dim,
        n_groups,
        cohort.config.n_actions,
        config.trunk_hidden,
        &mut seeding::stream(seed, "policy-init"),
    )?;
    let mut value = ValueParams::new(
        pooled_dim,
        n_groups,
        config.value_hidden,
        &mut seeding::stream(seed, "value-init"),
    )?;

    let pool = if workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::Config(format!("could not start {workers} workers: {e}")))?,
        )
    } else {
        None
    };

    let mut adam_state = AdamState::new(policy.param_count());
    let adam_hyper = AdamParams::default();
    let mut log = Vec::with_capacity(config.iterations);
    let mut final_batch = None;

    for iteration in 0..config.iterations {
        let started = Instant::now();
        let frozen = policy.freeze();

        let jobs: Vec<(usize, u64)> = (0..cohort.config.n_patients)
            .flat_map(|p| (0..config.rollouts_per_patient).map(move |r| (p, r as u64)))
            .collect();
        let run_one = |&(p, r): &(usize, u64)| -> Result<EpisodeData> {
            let episode = iteration as u64 * config.rollouts_per_patient as u64 + r;
            let mut rng =
                seeding::stream_indexed(seed, "rollout", &[iteration as u64, p as u64, r]);
            run_episode(cohort, fusion, &frozen, p, assignment.labels[p], episode, &mut rng)
        };
        let episodes: Vec<EpisodeData> = match &pool {
            Some(pool) => pool.install(|| {
                use rayon::prelude::*;
                jobs.par_iter().map(run_one).collect::<Result<Vec<_>>>()
            })?,
            None => jobs.iter().map(run_one).collect::<Result<Vec<_>>>()?,
        };

        let mut samples = Vec::new();
        let mut episode_returns: Vec<(usize, f64)> = Vec::with_capacity(episodes.len());
        for ep in &episodes {
            let returns = discounted_returns(&ep.rewards, cohort.config.discount)?;
            episode_returns.push((ep.group, returns[0]));
            for t in 0..returns.len() {
                samples.push(AdvantageSample {
                    patient_id: ep.patient_id,
                    time: t,
                    group: ep.group,
                    action: ep.actions[t],
                    return_to_go: returns[t],
                    baseline: value.predict(&ep.pooled[t], ep.group)?,
                    pooled: ep.pooled[t].clone(),
                });
            }
        }
        let batch = AdvantageBatch::build(samples, &config.advantage)?;
        if batch.is_empty() {
            return Err(Error::Usage("training produced an empty batch".into()));
        }

        let mut shuffle_rng = seeding::stream_indexed(seed, "shuffle", &[iteration as u64]);
        for _ in 0..config.epochs {
            let mut order: Vec<usize> = (0..batch.len()).collect();
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(config.minibatch_size) {
                let (objective, grads) = grpo_objective(&policy, &frozen, &batch, chunk, config)?;
                if !objective.is_finite() {
                    return Err(Error::Divergence {
                        iteration,
                        detail: format!("objective became {objective}"),
                    });
                }
                let mut flat = policy.flatten();
                let descent: Vec<f64> = grads.flatten().iter().map(|g| -g).collect();
                adam_step(&mut flat, &descent, &mut adam_state, config.step_size, &adam_hyper);
                let magnitude = flat.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                if !magnitude.is_finite() || magnitude > PARAM_CAP {
                    return Err(Error::Divergence {
                        iteration,
                        detail: format!("policy parameter magnitude reached {magnitude}"),
                    });
                }
                policy.assign_flat(&flat);
            }
        }

        let all: Vec<usize> = (0..batch.len()).collect();
        let (objective, _) = grpo_objective(&policy, &frozen, &batch, &all, config)?;
        let kl = group_kl(&policy, &frozen, &batch, &all)?;

        let mean_return =
            episode_returns.iter().map(|(_, g0)| g0).sum::<f64>() / episode_returns.len() as f64;
        let mut group_returns: BTreeMap<usize, f64> = BTreeMap::new();
        for g in 0..n_groups {
            let rets: Vec<f64> = episode_returns
                .iter()
                .filter(|(eg, _)| *eg == g)
                .map(|(_, g0)| *g0)
                .collect();
            let mean = if rets.is_empty() { 0.0 } else { rets.iter().sum::<f64>() / rets.len() as f64 };
            group_returns.insert(g, mean);
        }
        let mut group_kl_full: BTreeMap<usize, f64> = BTreeMap::new();
        for g in 0..n_groups {
            group_kl_full.insert(g, kl.get(&g).copied().unwrap_or(0.0));
        }

        let targets: Vec<f64> = batch.rows.iter().map(|r| r.return_to_go).collect();
        let groups: Vec<usize> = batch.rows.iter().map(|r| r.group).collect();
        value.fit(&batch.pooled, &groups, &targets, config.value_epochs, config.value_step)?;

        log.push(IterationStats {
            iteration,
            mean_return,
            group_returns,
            group_kl: group_kl_full,
            objective,
            wall_ms: started.elapsed().as_millis(),
        });
        final_batch = Some(batch);
    }

    Ok(TrainOutput { policy, value, log, final_batch })
}
