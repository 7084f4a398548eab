//! Returns, value baselines, and group-relative advantage shaping.
//!
//! The pipeline runs: discounted returns-to-go from raw rewards, a learned
//! value baseline V(s, g) subtracted to give the individual advantage, the
//! batch-empirical mean of those advantages within each group, and finally
//! the shaped quantity
//!
//! ```text
//! A_rel = alpha1 * A_ind + alpha2 * A_grp - alpha3 * |A_ind - A_grp|^beta
//! ```
//!
//! The penalty term pulls per-patient updates toward their group's typical
//! progress: a patient far above or below the group mean contributes less,
//! which damps policies that trade one group's outcomes against another's.
//! Shaped advantages are z-scored across the batch before entering the
//! policy objective; the raw values are kept alongside for inspection.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Matrix, Mlp, MlpGrads};

/// Floor on the batch standard deviation when z-scoring.
pub const NORM_STD_FLOOR: f64 = 1e-8;

/// Discounted returns-to-go: `G_t = r_t + discount * G_{t+1}`.
pub fn discounted_returns(rewards: &[f64], discount: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&discount) {
        return Err(Error::Usage(format!(
            "discount must lie in [0, 1], got {discount}"
        )));
    }
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, &r) in rewards.iter().enumerate().rev() {
        acc = r + discount * acc;
        returns[t] = acc;
    }
    Ok(returns)
}

/// Advantage of one sample over its learned baseline.
pub fn individual_advantage(return_to_go: f64, baseline: f64) -> f64 {
    return_to_go - baseline
}

/// Batch-empirical mean of individual advantages within each group.
pub fn group_mean_advantages(pairs: &[(usize, f64)]) -> BTreeMap<usize, f64> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &(group, adv) in pairs {
        let entry = sums.entry(group).or_insert((0.0, 0));
        entry.0 += adv;
        entry.1 += 1;
    }
    sums.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect()
}

/// Coefficients of the shaped advantage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageHyper {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub beta: f64,
}

impl Default for AdvantageHyper {
    fn default() -> Self {
        AdvantageHyper { alpha1: 1.0, alpha2: 0.5, alpha3: 0.1, beta: 2.0 }
    }
}

impl AdvantageHyper {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("beta", self.beta),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("advantage {name} must be finite, got {v}")));
            }
        }
        if self.alpha3 < 0.0 {
            return Err(Error::Config(format!(
                "alpha3 must be non-negative so the gap term stays a penalty, got {}",
                self.alpha3
            )));
        }
        if self.beta <= 0.0 {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Shaped advantage combining individual and group progress.
pub fn group_relative_advantage(individual: f64, group_mean: f64, hyper: &AdvantageHyper) -> f64 {
    hyper.alpha1 * individual + hyper.alpha2 * group_mean
        - hyper.alpha3 * (individual - group_mean).abs().powf(hyper.beta)
}

/// One training sample before advantage shaping.
#[derive(Clone, Debug)]
pub struct AdvantageSample {
    pub patient_id: usize,
    pub time: usize,
    pub group: usize,
    pub action: usize,
    pub return_to_go: f64,
    pub baseline: f64,
    pub pooled: Vec<f64>,
}

/// One shaped row; `pooled` lives in the parallel array on the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRow {
    pub patient_id: usize,
    pub time: usize,
    pub group: usize,
    pub action: usize,
    pub return_to_go: f64,
    pub baseline: f64,
    pub individual: f64,
    pub group_mean: f64,
    pub relative: f64,
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageBatch {
    pub rows: Vec<AdvantageRow>,
    pub pooled: Vec<Vec<f64>>,
    pub hyper: AdvantageHyper,
}

impl AdvantageBatch {
    /// Shapes and z-scores a batch of samples, preserving input order.
    pub fn build(samples: Vec<AdvantageSample>, hyper: &AdvantageHyper) -> Result<AdvantageBatch> {
        hyper.validate()?;
        if samples.is_empty() {
            return Ok(AdvantageBatch { rows: Vec::new(), pooled: Vec::new(), hyper: *hyper });
        }
        let dim = samples[0].pooled.len();
        if samples.iter().any(|s| s.pooled.len() != dim) {
            return Err(Error::Usage(
                "all pooled feature vectors in a batch must share one dimension".into(),
            ));
        }

        let individuals: Vec<f64> = samples
            .iter()
            .map(|s| individual_advantage(s.return_to_go, s.baseline))
            .collect();
        let pairs: Vec<(usize, f64)> = samples
            .iter()
            .zip(&individuals)
            .map(|(s, &a)| (s.group, a))
            .collect();
        let means = group_mean_advantages(&pairs);

        let relatives: Vec<f64> = samples
            .iter()
            .zip(&individuals)
            .map(|(s, &a)| group_relative_advantage(a, means[&s.group], hyper))
            .collect();

        let n = relatives.len() as f64;
        let mean = relatives.iter().sum::<f64>() / n;
        let var = relatives.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        let denom = var.sqrt().max(NORM_STD_FLOOR);

        let mut rows = Vec::with_capacity(samples.len());
        let mut pooled = Vec::with_capacity(samples.len());
        for ((sample, &individual), &relative) in
            samples.into_iter().zip(&individuals).zip(&relatives)
        {
            rows.push(AdvantageRow {
                patient_id: sample.patient_id,
                time: sample.time,
                group: sample.group,
                action: sample.action,
                return_to_go: sample.return_to_go,
                baseline: sample.baseline,
                individual,
                group_mean: means[&sample.group],
                relative,
                normalized: (relative - mean) / denom,
            });
            pooled.push(sample.pooled);
        }
        Ok(AdvantageBatch { rows, pooled, hyper: *hyper })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Groups present in the batch, ascending.
    pub fn groups(&self) -> Vec<usize> {
        let mut gs: Vec<usize> = self.rows.iter().map(|r| r.group).collect();
        gs.sort_unstable();
        gs.dedup();
        gs
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "patient_id,time,group,return_to_go,baseline,individual_adv,group_adv,relative_adv,alpha1,alpha2,alpha3,beta\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.patient_id,
                r.time,
                r.group,
                r.return_to_go,
                r.baseline,
                r.individual,
                r.group_mean,
                r.relative,
                self.hyper.alpha1,
                self.hyper.alpha2,
                self.hyper.alpha3,
                self.hyper.beta
            ));
        }
        out
    }
}

/// Value baseline `V(pooled, group)`: the pooled fused features concatenated
/// with a one-hot group code, through one tanh hidden layer to a scalar.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValueParams {
    pub net: Mlp,
    pub pooled_dim: usize,
    pub n_groups: usize,
}

impl ValueParams {
    pub fn new(pooled_dim: usize, n_groups: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<ValueParams> {
        if pooled_dim == 0 || n_groups == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "value network needs positive dimensions, got pooled {pooled_dim}, groups {n_groups}, hidden {hidden}"
            )));
        }
        let net = Mlp::new(
            &[pooled_dim + n_groups, hidden, 1],
            Activation::Tanh,
            Activation::Identity,
            rng,
        );
        Ok(ValueParams { net, pooled_dim, n_groups })
    }

    /// Concatenates pooled features with the one-hot group code.
    pub fn input(&self, pooled: &[f64], group: usize) -> Result<Vec<f64>> {
        if pooled.len() != self.pooled_dim {
            return Err(Error::Usage(format!(
                "value input has pooled length {}, expected {}",
                pooled.len(),
                self.pooled_dim
            )));
        }
        if group >= self.n_groups {
            return Err(Error::Usage(format!(
                "value input group {group} out of range for {} groups",
                self.n_groups
            )));
        }
        let mut x = Vec::with_capacity(self.pooled_dim + self.n_groups);
        x.extend_from_slice(pooled);
        x.extend((0..self.n_groups).map(|g| if g == group { 1.0 } else { 0.0 }));
        Ok(x)
    }

    pub fn predict(&self, pooled: &[f64], group: usize) -> Result<f64> {
        Ok(self.net.forward_row(&self.input(pooled, group)?)[0])
    }

    /// Mean squared error against `targets` and its gradient.
    pub fn loss_and_grads(
        &self,
        pooled: &[Vec<f64>],
        groups: &[usize],
        targets: &[f64],
    ) -> Result<(f64, MlpGrads)> {
        if pooled.len() != groups.len() || pooled.len() != targets.len() {
            return Err(Error::Usage(format!(
                "value fit got {} pooled rows, {} groups, {} targets",
                pooled.len(),
                groups.len(),
                targets.len()
            )));
        }
        if pooled.is_empty() {
            return Err(Error::Usage("value fit needs at least one sample".into()));
        }
        let rows: Vec<Vec<f64>> = pooled
            .iter()
            .zip(groups)
            .map(|(p, &g)| self.input(p, g))
            .collect::<Result<_>>()?;
        let inputs = Matrix::from_rows(&rows)?;
        let (preds, cache) = self.net.forward(&inputs);
        let n = targets.len() as f64;
        let mut loss = 0.0;
        let mut upstream = Matrix::zeros(targets.len(), 1);
        for (i, &target) in targets.iter().enumerate() {
            let err = preds[(i, 0)] - target;
            loss += err * err / n;
            upstream[(i, 0)] = 2.0 * err / n;
        }
        let (grads, _) = self.net.backward(&cache, &upstream);
        Ok((loss, grads))
    }

    /// Full-batch gradient descent on the squared error. Returns the loss
    /// measured at the start of each epoch.
    pub fn fit(
        &mut self,
        pooled: &[Vec<f64>],
        groups: &[usize],
        targets: &[f64],
        epochs: usize,
        step: f64,
    ) -> Result<Vec<f64>> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Usage(format!("value fit step must be positive, got {step}")));
        }
        // Backtracking keeps descent stable across target scales: a step that
        // would raise the loss is halved until it improves, so the recorded
        // MSE sequence is non-increasing regardless of the initial step.
        let mut step = step;
        let mut history = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let (loss, grads) = self.loss_and_grads(pooled, groups, targets)?;
            history.push(loss);
            let params = self.net.flatten();
            let flat_grads = grads.flatten();
            loop {
                let candidate: Vec<f64> =
                    params.iter().zip(&flat_grads).map(|(p, g)| p - step * g).collect();
                self.net.assign_flat(&candidate);
                let (candidate_loss, _) = self.loss_and_grads(pooled, groups, targets)?;
                if candidate_loss <= loss {
                    break;
                }
                if step < 1e-16 {
                    self.net.assign_flat(&params);
                    break;
                }
                step *= 0.5;
            }
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradient_check;
    use crate::seeding::stream;
    use rand::Rng;

    #[test]
    fn returns_hand_example() {
        let g = discounted_returns(&[1.0, 1.0, 1.0], 0.5).unwrap();
        // G_2 = 1, G_1 = 1 + 0.5, G_0 = 1 + 0.5 * 1.5.
        assert_eq!(g, vec![1.75, 1.5, 1.0]);
    }

    #[test]
    fn returns_match_double_loop_oracle() {
        for seed in 0..10u64 {
            let mut rng = stream(seed, "returns");
            let len = 1 + (seed as usize % 30);
            let rewards: Vec<f64> = (0..len).map(|_| rng.gen_range(-5.0..5.0)).collect();
            for discount in [0.0, 0.5, 0.95, 1.0] {
                let fast = discounted_returns(&rewards, discount).unwrap();
                for t in 0..len {
                    let slow: f64 = (t..len)
                        .map(|k| discount.powi((k - t) as i32) * rewards[k])
                        .sum();
                    assert!(
                        (fast[t] - slow).abs() < 1e-12,
                        "seed {seed} gamma {discount} t {t}: {} vs {}",
                        fast[t],
                        slow
                    );
                }
            }
        }
    }

    #[test]
    fn returns_edge_cases() {
        assert!(discounted_returns(&[], 0.9).unwrap().is_empty());
        assert_eq!(discounted_returns(&[3.0], 0.9).unwrap(), vec![3.0]);
        assert!(discounted_returns(&[1.0], 1.5).is_err());
        assert!(discounted_returns(&[1.0], -0.1).is_err());
    }

    #[test]
    fn worked_relative_advantage_example() {
        let hyper = AdvantageHyper { alpha1: 0.5, alpha2: 0.5, alpha3: 1.0, beta: 2.0 };
        // 0.5 * 2 + 0.5 * 1 - 1 * |2 - 1|^2 = 0.5.
        assert!((group_relative_advantage(2.0, 1.0, &hyper) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn default_hyper_values() {
        let h = AdvantageHyper::default();
        assert_eq!((h.alpha1, h.alpha2, h.alpha3, h.beta), (1.0, 0.5, 0.1, 2.0));
        assert!(h.validate().is_ok());
    }

    #[test]
    fn hyper_validation_rejects_bad_values() {
        let mut h = AdvantageHyper::default();
        h.alpha3 = -0.1;
        assert!(h.validate().is_err());
        h = AdvantageHyper { beta: 0.0, ..AdvantageHyper::default() };
        assert!(h.validate().is_err());
        h = AdvantageHyper { alpha1: f64::NAN, ..AdvantageHyper::default() };
        assert!(h.validate().is_err());
    }

    #[test]
    fn raising_alpha3_never_raises_the_advantage() {
        let mut rng = stream(7, "alpha3-mono");
        for _ in 0..1000 {
            let individual = rng.gen_range(-4.0..4.0);
            let group_mean = rng.gen_range(-4.0..4.0);
            let beta = rng.gen_range(0.5..3.0);
            let lo = rng.gen_range(0.0..1.0);
            let hi = lo + rng.gen_range(0.01..1.0);
            let base = AdvantageHyper { alpha1: 1.0, alpha2: 0.5, alpha3: lo, beta };
            let raised = AdvantageHyper { alpha3: hi, ..base };
            let a = group_relative_advantage(individual, group_mean, &base);
            let b = group_relative_advantage(individual, group_mean, &raised);
            assert!(b <= a, "alpha3 {lo} -> {hi} raised advantage {a} -> {b}");
            if (individual - group_mean).abs() > 1e-9 {
                assert!(b < a, "penalty should bite when the gap is non-zero");
            }
        }
    }

    #[test]
    fn gap_penalty_is_symmetric() {
        let hyper = AdvantageHyper { alpha1: 0.0, alpha2: 0.0, alpha3: 0.7, beta: 1.5 };
        let mut rng = stream(8, "gap-sym");
        for _ in 0..200 {
            let a = rng.gen_range(-3.0..3.0);
            let b = rng.gen_range(-3.0..3.0);
            let x = group_relative_advantage(a, b, &hyper);
            let y = group_relative_advantage(b, a, &hyper);
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn sample(patient: usize, group: usize, ret: f64, baseline: f64) -> AdvantageSample {
        AdvantageSample {
            patient_id: patient,
            time: 0,
            group,
            action: 0,
            return_to_go: ret,
            baseline,
            pooled: vec![0.0, 0.0],
        }
    }

    #[test]
    fn group_means_are_empirical_and_residuals_cancel() {
        let samples = vec![
            sample(0, 0, 3.0, 1.0),
            sample(1, 0, 5.0, 1.0),
            sample(2, 1, -2.0, 0.0),
            sample(3, 1, 4.0, 0.0),
            sample(4, 1, 1.0, 0.0),
        ];
        let batch = AdvantageBatch::build(samples, &AdvantageHyper::default()).unwrap();
        // Group 0 individuals: 2 and 4; group 1: -2, 4, 1.
        assert!((batch.rows[0].group_mean - 3.0).abs() < 1e-12);
        assert!((batch.rows[2].group_mean - 1.0).abs() < 1e-12);
        for g in [0usize, 1] {
            let residual: f64 = batch
                .rows
                .iter()
                .filter(|r| r.group == g)
                .map(|r| r.individual - r.group_mean)
                .sum();
            assert!(residual.abs() < 1e-12, "group {g} residual {residual}");
        }
        assert_eq!(batch.groups(), vec![0, 1]);
    }

    #[test]
    fn normalized_column_is_z_scored() {
        let mut rng = stream(9, "zscore");
        let samples: Vec<AdvantageSample> = (0..50)
            .map(|i| sample(i, i % 3, rng.gen_range(-5.0..5.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let batch = AdvantageBatch::build(samples, &AdvantageHyper::default()).unwrap();
        let n = batch.len() as f64;
        let mean: f64 = batch.rows.iter().map(|r| r.normalized).sum::<f64>() / n;
        let var: f64 = batch.rows.iter().map(|r| r.normalized * r.normalized).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10, "z-scored mean {mean}");
        assert!((var - 1.0).abs() < 1e-10, "z-scored variance {var}");
    }

    #[test]
    fn constant_batch_normalizes_to_zeros() {
        let samples: Vec<AdvantageSample> = (0..4).map(|i| sample(i, 0, 2.0, 1.0)).collect();
        let batch = AdvantageBatch::build(samples, &AdvantageHyper::default()).unwrap();
        for r in &batch.rows {
            assert_eq!(r.normalized, 0.0);
            assert!((r.relative - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn build_rejects_ragged_pooled_vectors() {
        let mut samples = vec![sample(0, 0, 1.0, 0.0), sample(1, 0, 2.0, 0.0)];
        samples[1].pooled = vec![1.0, 2.0, 3.0];
        assert!(AdvantageBatch::build(samples, &AdvantageHyper::default()).is_err());
        let empty = AdvantageBatch::build(Vec::new(), &AdvantageHyper::default()).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn csv_has_pinned_header_and_one_line_per_row() {
        let samples = vec![sample(3, 1, 2.5, 0.5), sample(4, 0, -1.0, 0.0)];
        let batch = AdvantageBatch::build(samples, &AdvantageHyper::default()).unwrap();
        let csv = batch.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "patient_id,time,group,return_to_go,baseline,individual_adv,group_adv,relative_adv,alpha1,alpha2,alpha3,beta"
        );
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("3,0,1,2.5,0.5,2,"));
    }

    #[test]
    fn value_input_appends_one_hot_group() {
        let mut rng = stream(10, "value-in");
        let v = ValueParams::new(2, 3, 4, &mut rng).unwrap();
        assert_eq!(v.input(&[1.0, 2.0], 1).unwrap(), vec![1.0, 2.0, 0.0, 1.0, 0.0]);
        assert!(v.input(&[1.0], 0).is_err());
        assert!(v.input(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn value_fit_loss_is_monotone_and_shrinks() {
        let mut rng = stream(11, "value-fit");
        let mut v = ValueParams::new(3, 2, 8, &mut rng).unwrap();
        let pooled: Vec<Vec<f64>> =
            (0..20).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let groups: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let targets: Vec<f64> = pooled
            .iter()
            .zip(&groups)
            .map(|(p, &g)| p[0] - 0.5 * p[2] + g as f64)
            .collect();
        let history = v.fit(&pooled, &groups, &targets, 300, 0.05).unwrap();
        assert_eq!(history.len(), 300);
        for w in history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "loss rose within an epoch pair: {:?}", w);
        }
        assert!(
            history[299] < 0.2 * history[0],
            "loss barely moved: {} -> {}",
            history[0],
            history[299]
        );
        let (final_loss, _) = v.loss_and_grads(&pooled, &groups, &targets).unwrap();
        assert!(final_loss <= history[299]);
    }

    #[test]
    fn value_gradient_matches_finite_differences() {
        let mut rng = stream(12, "value-fd");
        let v = ValueParams::new(2, 2, 5, &mut rng).unwrap();
        let pooled: Vec<Vec<f64>> =
            (0..6).map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let groups: Vec<usize> = (0..6).map(|i| i % 2).collect();
        let targets: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let point = v.net.flatten();
        let (_, grads) = v.loss_and_grads(&pooled, &groups, &targets).unwrap();
        let probe = v.clone();
        let pooled2 = pooled.clone();
        let groups2 = groups.clone();
        let targets2 = targets.clone();
        let report = gradient_check(
            move |theta| {
                let mut net = probe.clone();
                net.net.assign_flat(theta);
                net.loss_and_grads(&pooled2, &groups2, &targets2).unwrap().0
            },
            &point,
            &grads.flatten(),
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_error < 1e-6,
            "value loss gradient off by {} at parameter {}",
            report.max_rel_error,
            report.worst_index
        );
    }

    #[test]
    fn value_fit_validates_inputs() {
        let mut rng = stream(13, "value-bad");
        let mut v = ValueParams::new(2, 2, 4, &mut rng).unwrap();
        assert!(v.fit(&[vec![1.0, 2.0]], &[0, 1], &[1.0], 5, 0.1).is_err());
        assert!(v.fit(&[], &[], &[], 5, 0.1).is_err());
        assert!(v.fit(&[vec![1.0, 2.0]], &[0], &[1.0], 5, 0.0).is_err());
        assert!(ValueParams::new(0, 2, 4, &mut rng).is_err());
    }
}
