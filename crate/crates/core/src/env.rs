//! Seeded synthetic patient-cohort MDP.
//!
//! A cohort is drawn once from a seed: each hidden generator group g gets
//! linear dynamics `s' = A_g s + B_g e(a) + noise`, a target state `s*_g`,
//! and an initial-state mean; each patient gets a static feature vector
//! drawn from its group's Gaussian. Rewards are
//! `-|s' - s*_g|^2 - 0.1 * [a > 0]`, so doing nothing is free and every
//! treatment carries a small cost.
//!
//! `A_g` is rescaled so its largest singular value is at most 0.95, which
//! bounds the spectral radius by the same number and keeps uncontrolled
//! dynamics contractive.
//!
//! Observations are per-modality linear projections `P_m` of the state
//! history plus Gaussian noise. Observation noise for (patient, modality) is
//! replayed from a dedicated stream starting at t = 0 on every call, so a
//! longer prefix extends a shorter one row-for-row instead of redrawing it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ModalitySeries;
use crate::nn::Matrix;
use crate::seeding;

/// Per-step cost of any non-trivial action (index > 0).
pub const ACTION_COST: f64 = 0.1;
/// Cap on the largest singular value (hence spectral radius) of `A_g`.
pub const SPECTRAL_CAP: f64 = 0.95;

const ACTION_EFFECT_SCALE: f64 = 0.5;
const TARGET_SCALE: f64 = 0.8;
const INIT_MEAN_SCALE: f64 = 1.0;

fn default_feature_dim() -> usize {
    4
}

fn default_feature_noise_std() -> f64 {
    1.0
}

fn default_feature_mean_sep() -> f64 {
    6.0
}

/// Everything needed to draw a cohort deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    /// Number of patients N.
    pub n_patients: usize,
    /// Hidden generator groups used to draw dynamics and features.
    pub n_latent_groups: usize,
    /// Observation modalities M.
    pub n_modalities: usize,
    /// Raw dimension of each modality; length must equal `n_modalities`.
    pub modality_dims: Vec<usize>,
    /// Episode length T.
    pub horizon: usize,
    /// Action count, including the no-op at index 0.
    pub n_actions: usize,
    /// Discount factor.
    pub discount: f64,
    /// Dimension of the physiological state.
    pub state_dim: usize,
    /// Std of transition, initial-state, and observation noise.
    pub noise_std: f64,
    pub seed: u64,
    /// Dimension of the static feature vector x_i.
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Std of x_i around its group mean.
    #[serde(default = "default_feature_noise_std")]
    pub feature_noise_std: f64,
    /// Distance between adjacent group feature means.
    #[serde(default = "default_feature_mean_sep")]
    pub feature_mean_sep: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_patients: 32,
            n_latent_groups: 3,
            n_modalities: 3,
            modality_dims: vec![3, 3, 3],
            horizon: 20,
            n_actions: 4,
            discount: 0.95,
            state_dim: 6,
            noise_std: 0.05,
            seed: 0,
            feature_dim: default_feature_dim(),
            feature_noise_std: default_feature_noise_std(),
            feature_mean_sep: default_feature_mean_sep(),
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_patients == 0 {
            return fail("n_patients must be at least 1".into());
        }
        if self.n_latent_groups == 0 || self.n_latent_groups > self.n_patients {
            return fail(format!(
                "n_latent_groups must be in 1..={}, got {}",
                self.n_patients, self.n_latent_groups
            ));
        }
        if self.n_modalities == 0 {
            return fail("n_modalities must be at least 1".into());
        }
        if self.modality_dims.len() != self.n_modalities {
            return fail(format!(
                "modality_dims has {} entries but n_modalities is {}",
                self.modality_dims.len(),
                self.n_modalities
            ));
        }
        if self.modality_dims.iter().any(|&d| d == 0) {
            return fail("every modality dimension must be at least 1".into());
        }
        if self.horizon == 0 {
            return fail("horizon must be at least 1".into());
        }
        if self.n_actions == 0 {
            return fail("n_actions must be at least 1".into());
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return fail(format!("discount must lie in (0, 1], got {}", self.discount));
        }
        if self.state_dim == 0 {
            return fail("state_dim must be at least 1".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std must be finite and non-negative, got {}", self.noise_std));
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be at least 1".into());
        }
        if !(self.feature_noise_std >= 0.0 && self.feature_noise_std.is_finite()) {
            return fail(format!(
                "feature_noise_std must be finite and non-negative, got {}",
                self.feature_noise_std
            ));
        }
        if !(self.feature_mean_sep >= 0.0 && self.feature_mean_sep.is_finite()) {
            return fail(format!(
                "feature_mean_sep must be finite and non-negative, got {}",
                self.feature_mean_sep
            ));
        }
        Ok(())
    }
}

/// A patient's observable situation at one time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientState {
    pub physiological: Vec<f64>,
    /// The static feature vector x_i; constant over an episode.
    pub static_features: Vec<f64>,
    pub time_index: usize,
}

/// One transition, emitted by [`Cohort::step`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub patient_id: usize,
    pub time_index: usize,
    pub state: PatientState,
    pub action: usize,
    pub reward: f64,
    pub next_state: PatientState,
    pub done: bool,
}

/// A full episode for one patient.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub patient_id: usize,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    /// Physiological states s_0 ... s_T (one more entry than steps).
    pub fn state_history(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> =
            self.steps.iter().map(|s| s.state.physiological.clone()).collect();
        if let Some(last) = self.steps.last() {
            out.push(last.next_state.physiological.clone());
        }
        out
    }
}

/// Hidden dynamics of one generator group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDynamics {
    /// A_g, rescaled to spectral radius <= [`SPECTRAL_CAP`].
    pub transition: Matrix,
    /// B_g with one column per action; column 0 is zero so the no-op truly
    /// does nothing.
    pub action_effect: Matrix,
    /// Target state s*_g appearing in the reward.
    pub target: Vec<f64>,
    /// Mean of the initial physiological state.
    pub init_mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientInfo {
    pub features: Vec<f64>,
    /// Ground-truth generator group, hidden from policies.
    pub generator_group: usize,
}

/// A fully drawn cohort: replayable from its JSON dump alone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Cohort {
    pub config: CohortConfig,
    pub groups: Vec<GroupDynamics>,
    pub patients: Vec<PatientInfo>,
    /// Fixed observation projections P_m, one per modality.
    pub modality_projections: Vec<Matrix>,
}

fn draw_normal_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn draw_normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = draw_normal_vec(rng, rows * cols, scale);
    Matrix::from_vec(rows, cols, data).expect("shape is consistent")
}

/// Largest singular value via power iteration on A^T A, started from the
/// normalized ones vector.
fn operator_norm(a: &Matrix) -> f64 {
    let n = a.cols();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut sigma = 0.0;
    for _ in 0..200 {
        let av = a.matvec(&v);
        let atav = a.transpose().matvec(&av);
        let norm = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        sigma = norm.sqrt();
        for (x, y) in v.iter_mut().zip(&atav) {
            *x = y / norm;
        }
    }
    sigma
}

/// Draws a cohort from its config. Deterministic: every random quantity
/// comes from a stream labeled by what it is for.
pub fn generate_cohort(config: &CohortConfig) -> Result<Cohort> {
    config.validate()?;
    let d = config.state_dim;

    let mut groups = Vec::with_capacity(config.n_latent_groups);
    for g in 0..config.n_latent_groups {
        let mut rng = seeding::stream_indexed(config.seed, "cohort-group", &[g as u64]);
        let mut transition = draw_normal_matrix(&mut rng, d, d, 1.0 / (d as f64).sqrt());
        let sigma = operator_norm(&transition);
        if sigma > SPECTRAL_CAP {
            transition = transition.scale(SPECTRAL_CAP / sigma);
        }
        let mut action_effect = Matrix::zeros(d, config.n_actions);
        for a in 1..config.n_actions {
            for i in 0..d {
                action_effect[(i, a)] = ACTION_EFFECT_SCALE * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let target = draw_normal_vec(&mut rng, d, TARGET_SCALE);
        let init_mean = draw_normal_vec(&mut rng, d, INIT_MEAN_SCALE);
        groups.push(GroupDynamics { transition, action_effect, target, init_mean });
    }

    let mut patients = Vec::with_capacity(config.n_patients);
    for i in 0..config.n_patients {
        let g = i % config.n_latent_groups;
        let mut rng = seeding::stream_indexed(config.seed, "cohort-patient", &[i as u64]);
        let mut features = draw_normal_vec(&mut rng, config.feature_dim, config.feature_noise_std);
        // Group means sit feature_mean_sep apart along the first feature
        // axis, so adjacent groups are exactly that far apart.
        features[0] += g as f64 * config.feature_mean_sep;
        patients.push(PatientInfo { features, generator_group: g });
    }

    let mut modality_projections = Vec::with_capacity(config.n_modalities);
    for (m, &dim) in config.modality_dims.iter().enumerate() {
        let mut rng = seeding::stream_indexed(config.seed, "cohort-modality", &[m as u64]);
        modality_projections.push(draw_normal_matrix(&mut rng, dim, d, 1.0 / (d as f64).sqrt()));
    }

    Ok(Cohort { config: config.clone(), groups, patients, modality_projections })
}

/// Checks that a policy's output is a distribution over the action set.
fn validate_distribution(dist: &[f64], n_actions: usize) -> Result<()> {
    if dist.len() != n_actions {
        return Err(Error::Usage(format!(
            "policy returned {} action probabilities, expected {}",
            dist.len(),
            n_actions
        )));
    }
    if dist.iter().any(|&p| !p.is_finite() || p < -1e-12) {
        return Err(Error::Usage("policy returned negative or non-finite probability mass".into()));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Usage(format!(
            "policy distribution sums to {total}, expected 1 within 1e-6"
        )));
    }
    Ok(())
}

fn sample_action(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (a, &p) in dist.iter().enumerate() {
        acc += p.max(0.0);
        if u < acc {
            return a;
        }
    }
    dist.len() - 1
}

impl Cohort {
    fn patient(&self, patient_id: usize) -> Result<&PatientInfo> {
        self.patients.get(patient_id).ok_or_else(|| {
            Error::Usage(format!(
                "unknown patient id {patient_id}; cohort has {} patients",
                self.patients.len()
            ))
        })
    }

    fn group_of(&self, patient_id: usize) -> Result<&GroupDynamics> {
        let info = self.patient(patient_id)?;
        Ok(&self.groups[info.generator_group])
    }

    /// Initial state for `(patient, episode)`. Deterministic in all three of
    /// (cohort seed, patient, episode); with `noise_std = 0` it equals the
    /// group's initial mean exactly.
    pub fn reset(&self, patient_id: usize, episode: u64) -> Result<PatientState> {
        let info = self.patient(patient_id)?;
        let group = &self.groups[info.generator_group];
        let mut rng =
            seeding::stream_indexed(self.config.seed, "reset", &[patient_id as u64, episode]);
        let physiological = group
            .init_mean
            .iter()
            .map(|&m| m + self.config.noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(PatientState {
            physiological,
            static_features: info.features.clone(),
            time_index: 0,
        })
    }

    /// One transition under the hidden group dynamics. Transition noise is
    /// drawn from the caller's stream.
    pub fn step(
        &self,
        patient_id: usize,
        state: &PatientState,
        action: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepRecord> {
        let group = self.group_of(patient_id)?;
        if action >= self.config.n_actions {
            return Err(Error::Usage(format!(
                "action {action} out of range; cohort has {} actions",
                self.config.n_actions
            )));
        }
        if state.time_index >= self.config.horizon {
            return Err(Error::Usage(format!(
                "episode already finished: time index {} at horizon {}",
                state.time_index, self.config.horizon
            )));
        }
        if state.physiological.len() != self.config.state_dim {
            return Err(Error::Usage(format!(
                "state dimension {} does not match cohort state_dim {}",
                state.physiological.len(),
                self.config.state_dim
            )));
        }

        let mut next = group.transition.matvec(&state.physiological);
        for (i, n) in next.iter_mut().enumerate() {
            *n += group.action_effect[(i, action)];
            *n += self.config.noise_std * rng.sample::<f64, _>(StandardNormal);
        }
        let dist_sq: f64 =
            next.iter().zip(&group.target).map(|(a, b)| (a - b) * (a - b)).sum();
        let cost = if action > 0 { ACTION_COST } else { 0.0 };
        let reward = -dist_sq - cost;
        let done = state.time_index + 1 == self.config.horizon;

        Ok(StepRecord {
            patient_id,
            time_index: state.time_index,
            state: state.clone(),
            action,
            reward,
            next_state: PatientState {
                physiological: next,
                static_features: state.static_features.clone(),
                time_index: state.time_index + 1,
            },
            done,
        })
    }

    /// Projects a state-history prefix into each modality. Observation noise
    /// for (patient, modality) replays from t = 0 on every call, so the
    /// rows for a shared prefix are identical across calls.
    pub fn observe_modalities(
        &self,
        patient_id: usize,
        history: &[Vec<f64>],
    ) -> Result<Vec<ModalitySeries>> {
        self.patient(patient_id)?;
        if history.is_empty() {
            return Err(Error::Usage("cannot observe an empty state history".into()));
        }
        if history.iter().any(|s| s.len() != self.config.state_dim) {
            return Err(Error::Usage("state history entry has wrong dimension".into()));
        }
        let mut out = Vec::with_capacity(self.config.n_modalities);
        for (m, proj) in self.modality_projections.iter().enumerate() {
            let mut rng = seeding::stream_indexed(
                self.config.seed,
                "observe",
                &[patient_id as u64, m as u64],
            );
            let dim = proj.rows();
            let mut data = Matrix::zeros(history.len(), dim);
            for (t, state) in history.iter().enumerate() {
                let row = proj.matvec(state);
                for (c, v) in row.into_iter().enumerate() {
                    data[(t, c)] =
                        v + self.config.noise_std * rng.sample::<f64, _>(StandardNormal);
                }
            }
            out.push(ModalitySeries { modality_id: m, data });
        }
        Ok(out)
    }

    /// Runs one full episode. At each step the policy closure sees the
    /// modality projections of the state history so far plus the caller's
    /// group label for this patient, and must return a distribution over
    /// actions; the action is sampled from the caller's stream.
    pub fn rollout(
        &self,
        patient_id: usize,
        group_label: usize,
        policy: &mut dyn FnMut(&[ModalitySeries], usize) -> Vec<f64>,
        episode: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Trajectory> {
        let mut state = self.reset(patient_id, episode)?;
        let mut history = vec![state.physiological.clone()];
        let mut steps = Vec::with_capacity(self.config.horizon);
        for _ in 0..self.config.horizon {
            let obs = self.observe_modalities(patient_id, &history)?;
            let dist = policy(&obs, group_label);
            validate_distribution(&dist, self.config.n_actions)?;
            let action = sample_action(&dist, rng);
            let record = self.step(patient_id, &state, action, rng)?;
            state = record.next_state.clone();
            history.push(state.physiological.clone());
            steps.push(record);
        }
        Ok(Trajectory { patient_id, steps })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Cohort> {
        let cohort: Cohort = serde_json::from_str(text)?;
        cohort.config.validate()?;
        Ok(cohort)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::stream;

    fn small_config() -> CohortConfig {
        CohortConfig {
            n_patients: 6,
            n_latent_groups: 2,
            n_modalities: 2,
            modality_dims: vec![2, 3],
            horizon: 5,
            n_actions: 3,
            state_dim: 4,
            noise_std: 0.1,
            seed: 7,
            ..CohortConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        CohortConfig::default().validate().unwrap();
    }

    #[test]
    fn validation_rejects_inconsistent_configs() {
        let mut c = small_config();
        c.modality_dims = vec![2];
        assert!(matches!(c.validate(), Err(Error::Config(_))));

        let mut c = small_config();
        c.n_latent_groups = 7;
        assert!(c.validate().is_err());

        let mut c = small_config();
        c.discount = 1.5;
        assert!(c.validate().is_err());

        let mut c = small_config();
        c.noise_std = -0.1;
        assert!(c.validate().is_err());

        let mut c = small_config();
        c.horizon = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let cfg = small_config();
        let a = generate_cohort(&cfg).unwrap().to_json().unwrap();
        let b = generate_cohort(&cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b);

        let mut other = cfg;
        other.seed = 8;
        let c = generate_cohort(&other).unwrap().to_json().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn transition_matrices_are_contractive() {
        let cohort = generate_cohort(&CohortConfig::default()).unwrap();
        let mut rng = stream(99, "contraction-probe");
        for group in &cohort.groups {
            // Necessary condition for operator norm <= cap: no vector is
            // expanded past it.
            for _ in 0..50 {
                let x = draw_normal_vec(&mut rng, cohort.config.state_dim, 1.0);
                let ax = group.transition.matvec(&x);
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nax = ax.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(nax <= SPECTRAL_CAP * nx * (1.0 + 1e-9));
            }
            // Longhand power iteration on A^T A as an independent estimate.
            let a = &group.transition;
            let d = a.cols();
            let mut v = vec![0.5; d];
            let mut lambda = 0.0;
            for _ in 0..500 {
                let mut w = vec![0.0; d];
                for i in 0..d {
                    for j in 0..d {
                        let mut atij = 0.0;
                        for k in 0..d {
                            atij += a[(k, i)] * a[(k, j)];
                        }
                        w[i] += atij * v[j];
                    }
                }
                lambda = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                for (vi, wi) in v.iter_mut().zip(&w) {
                    *vi = wi / lambda;
                }
            }
            assert!(lambda.sqrt() <= SPECTRAL_CAP + 1e-6, "sigma_max {}", lambda.sqrt());
        }
    }

    #[test]
    fn no_op_column_is_zero() {
        let cohort = generate_cohort(&small_config()).unwrap();
        for group in &cohort.groups {
            for i in 0..cohort.config.state_dim {
                assert_eq!(group.action_effect[(i, 0)], 0.0);
            }
        }
    }

    #[test]
    fn generator_groups_are_round_robin() {
        let cohort = generate_cohort(&small_config()).unwrap();
        for (i, p) in cohort.patients.iter().enumerate() {
            assert_eq!(p.generator_group, i % cohort.config.n_latent_groups);
        }
    }

    #[test]
    fn feature_means_are_separated() {
        let mut cfg = small_config();
        cfg.n_patients = 200;
        cfg.feature_noise_std = 0.0;
        cfg.feature_mean_sep = 6.0;
        let cohort = generate_cohort(&cfg).unwrap();
        // With zero feature noise each patient sits exactly on its group
        // mean, and adjacent means are exactly the separation apart.
        let d0 = &cohort.patients[0].features;
        let d1 = &cohort.patients[1].features;
        let dist: f64 =
            d0.iter().zip(d1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!((dist - 6.0).abs() < 1e-12);
    }

    #[test]
    fn reset_is_deterministic_per_episode() {
        let cohort = generate_cohort(&small_config()).unwrap();
        let a = cohort.reset(2, 5).unwrap();
        let b = cohort.reset(2, 5).unwrap();
        assert_eq!(a, b);
        let c = cohort.reset(2, 6).unwrap();
        assert_ne!(a.physiological, c.physiological);
    }

    #[test]
    fn zero_noise_reset_hits_the_group_mean_exactly() {
        let mut cfg = small_config();
        cfg.noise_std = 0.0;
        let cohort = generate_cohort(&cfg).unwrap();
        let s = cohort.reset(1, 0).unwrap();
        let expected = &cohort.groups[cohort.patients[1].generator_group].init_mean;
        assert_eq!(&s.physiological, expected);
    }

    #[test]
    fn step_matches_hand_computed_linear_dynamics() {
        let mut cfg = small_config();
        cfg.noise_std = 0.0;
        cfg.state_dim = 2;
        cfg.modality_dims = vec![2, 2];
        let mut cohort = generate_cohort(&cfg).unwrap();
        cohort.groups[0] = GroupDynamics {
            transition: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            action_effect: Matrix::from_rows(&[
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, -2.0],
            ])
            .unwrap(),
            target: vec![3.0, 1.0],
            init_mean: vec![0.0, 0.0],
        };
        let state = PatientState {
            physiological: vec![2.0, 0.5],
            static_features: cohort.patients[0].features.clone(),
            time_index: 0,
        };
        let mut rng = stream(0, "step-test");
        // Action 1 adds B[:, 1] = [1, 0]: next = [3, 0.5].
        let rec = cohort.step(0, &state, 1, &mut rng).unwrap();
        assert_eq!(rec.next_state.physiological, vec![3.0, 0.5]);
        // reward = -|[3, 0.5] - [3, 1]|^2 - 0.1 = -0.25 - 0.1.
        assert!((rec.reward - (-0.35)).abs() < 1e-12);
        assert_eq!(rec.next_state.time_index, 1);
        assert!(!rec.done);
    }

    #[test]
    fn reward_is_zero_at_target_under_no_op() {
        let mut cfg = small_config();
        cfg.noise_std = 0.0;
        let mut cohort = generate_cohort(&cfg).unwrap();
        let d = cfg.state_dim;
        cohort.groups[0].transition = Matrix::identity(d);
        cohort.groups[0].action_effect = Matrix::zeros(d, cfg.n_actions);
        let target = cohort.groups[0].target.clone();
        let state = PatientState {
            physiological: target,
            static_features: cohort.patients[0].features.clone(),
            time_index: 0,
        };
        let mut rng = stream(0, "reward-test");
        let rec = cohort.step(0, &state, 0, &mut rng).unwrap();
        assert_eq!(rec.reward, 0.0);
    }

    #[test]
    fn reward_recomputes_from_the_emitted_record() {
        let cohort = generate_cohort(&small_config()).unwrap();
        let mut rng = stream(4, "reward-recompute");
        let mut policy = |_: &[ModalitySeries], _: usize| vec![1.0 / 3.0; 3];
        let traj = cohort.rollout(3, 0, &mut policy, 0, &mut rng).unwrap();
        let target = &cohort.groups[cohort.patients[3].generator_group].target;
        for rec in &traj.steps {
            let dist_sq: f64 = rec
                .next_state
                .physiological
                .iter()
                .zip(target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let cost = if rec.action > 0 { ACTION_COST } else { 0.0 };
            assert!((rec.reward - (-dist_sq - cost)).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_step_calls_are_rejected() {
        let cohort = generate_cohort(&small_config()).unwrap();
        let state = cohort.reset(0, 0).unwrap();
        let mut rng = stream(1, "invalid-step");
        assert!(cohort.step(0, &state, 99, &mut rng).is_err());
        assert!(cohort.step(42, &state, 0, &mut rng).is_err());
        let finished = PatientState { time_index: 5, ..state };
        assert!(matches!(
            cohort.step(0, &finished, 0, &mut rng),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn rollout_covers_the_horizon_and_chains_states() {
        let cohort = generate_cohort(&small_config()).unwrap();
        let mut rng = stream(2, "rollout");
        let mut policy = |_: &[ModalitySeries], _: usize| vec![0.5, 0.25, 0.25];
        let traj = cohort.rollout(1, 1, &mut policy, 0, &mut rng).unwrap();
        assert_eq!(traj.steps.len(), cohort.config.horizon);
        for (t, rec) in traj.steps.iter().enumerate() {
            assert_eq!(rec.time_index, t);
            assert_eq!(rec.done, t + 1 == cohort.config.horizon);
            if t > 0 {
                assert_eq!(
                    rec.state.physiological,
                    traj.steps[t - 1].next_state.physiological
                );
            }
        }
        assert_eq!(traj.state_history().len(), cohort.config.horizon + 1);
    }

    #[test]
    fn invalid_policy_distributions_abort_the_rollout() {
        let cohort = generate_cohort(&small_config()).unwrap();
        let mut rng = stream(3, "bad-policy");
        let mut wrong_len = |_: &[ModalitySeries], _: usize| vec![0.5, 0.5];
        assert!(cohort.rollout(0, 0, &mut wrong_len, 0, &mut rng).is_err());
        let mut negative = |_: &[ModalitySeries], _: usize| vec![1.5, -0.5, 0.0];
        assert!(cohort.rollout(0, 0, &mut negative, 0, &mut rng).is_err());
        let mut bad_sum = |_: &[ModalitySeries], _: usize| vec![0.5, 0.2, 0.2];
        assert!(matches!(
            cohort.rollout(0, 0, &mut bad_sum, 0, &mut rng),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn zero_noise_rollouts_coincide_across_streams() {
        let mut cfg = small_config();
        cfg.noise_std = 0.0;
        let cohort = generate_cohort(&cfg).unwrap();
        // Deterministic policy: always the one-hot no-op.
        let mut policy = |_: &[ModalitySeries], _: usize| vec![1.0, 0.0, 0.0];
        let mut rng_a = stream(10, "a");
        let mut rng_b = stream(20, "b");
        let ta = cohort.rollout(0, 0, &mut policy, 3, &mut rng_a).unwrap();
        let tb = cohort.rollout(0, 0, &mut policy, 3, &mut rng_b).unwrap();
        for (x, y) in ta.steps.iter().zip(&tb.steps) {
            assert_eq!(x.state.physiological, y.state.physiological);
            assert_eq!(x.reward, y.reward);
            assert_eq!(x.action, y.action);
        }
    }

    #[test]
    fn observations_extend_prefixes_row_for_row() {
        let cohort = generate_cohort(&small_config()).unwrap();
        let mut rng = stream(5, "obs-prefix");
        let mut policy = |_: &[ModalitySeries], _: usize| vec![1.0 / 3.0; 3];
        let traj = cohort.rollout(2, 0, &mut policy, 0, &mut rng).unwrap();
        let history = traj.state_history();
        let short = cohort.observe_modalities(2, &history[..3]).unwrap();
        let long = cohort.observe_modalities(2, &history).unwrap();
        for (s, l) in short.iter().zip(&long) {
            assert_eq!(s.modality_id, l.modality_id);
            for t in 0..3 {
                assert_eq!(s.data.row(t), l.data.row(t));
            }
        }
    }

    #[test]
    fn noiseless_observation_is_the_projection_itself() {
        let mut cfg = small_config();
        cfg.noise_std = 0.0;
        cfg.state_dim = 3;
        cfg.modality_dims = vec![2, 2];
        let mut cohort = generate_cohort(&cfg).unwrap();
        // Identity-slice projection: modality 0 reads state coordinates 0
        // and 1 directly.
        cohort.modality_projections[0] =
            Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        cohort.modality_projections[1] =
            Matrix::from_rows(&[vec![0.0, 0.0, 2.0], vec![1.0, 1.0, 0.0]]).unwrap();
        let history = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.25]];
        let obs = cohort.observe_modalities(0, &history).unwrap();
        assert_eq!(obs[0].data.row(0), &[1.0, 2.0]);
        assert_eq!(obs[0].data.row(1), &[-1.0, 0.5]);
        // Second modality differs from the first only through its fixed
        // projection: [2 * s2, s0 + s1].
        assert_eq!(obs[1].data.row(0), &[6.0, 3.0]);
        assert_eq!(obs[1].data.row(1), &[0.5, -0.5]);
    }

    #[test]
    fn cohort_json_round_trip_preserves_behavior() {
        let cohort = generate_cohort(&small_config()).unwrap();
        let restored = Cohort::from_json(&cohort.to_json().unwrap()).unwrap();
        let mut rng_a = stream(6, "roundtrip");
        let mut rng_b = stream(6, "roundtrip");
        let mut policy = |_: &[ModalitySeries], _: usize| vec![1.0 / 3.0; 3];
        let ta = cohort.rollout(4, 0, &mut policy, 1, &mut rng_a).unwrap();
        let tb = restored.rollout(4, 0, &mut policy, 1, &mut rng_b).unwrap();
        assert_eq!(
            serde_json::to_string(&ta).unwrap(),
            serde_json::to_string(&tb).unwrap()
        );
    }
}
