//! Patient embeddings and seeded k-means grouping.
//!
//! The embedding network is drawn once from a seed and never trained; it
//! exists to place static patient features in a space where k-means can find
//! the latent groups. Clustering is k-means++ seeding followed by Lloyd
//! iterations, with deterministic tie-breaking (lowest centroid index) and
//! empty-cluster repair (the empty centroid moves to the point farthest from
//! its assigned centroid), so one seed always yields one assignment.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::Cohort;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::seeding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientEmbedding {
    pub patient_id: usize,
    pub vector: Vec<f64>,
}

/// Result of clustering patient embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    /// Group index per patient, each in `0..n_groups`.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub n_groups: usize,
    /// Sum of squared distances from each point to its centroid.
    pub inertia: f64,
}

impl GroupAssignment {
    pub fn group_members(&self, group: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == group)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<GroupAssignment> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Runs one patient's static features through the frozen embedding network.
pub fn embed(phi: &Mlp, patient_id: usize, features: &[f64]) -> Result<PatientEmbedding> {
    if features.len() != phi.input_dim() {
        return Err(Error::Usage(format!(
            "feature vector has length {}, embedding network expects {}",
            features.len(),
            phi.input_dim()
        )));
    }
    Ok(PatientEmbedding { patient_id, vector: phi.forward_row(features) })
}

/// Embeds every patient in roster order.
pub fn embed_cohort(phi: &Mlp, cohort: &Cohort) -> Result<Vec<PatientEmbedding>> {
    cohort
        .patients
        .iter()
        .enumerate()
        .map(|(i, p)| embed(phi, i, &p.features))
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid with ties broken toward the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

fn assignment_inertia(points: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum()
}

/// Moves each empty centroid onto the point currently farthest from its
/// assigned centroid, claiming that point immediately so two empty clusters
/// never grab the same one.
fn repair_empty_clusters(
    points: &[Vec<f64>],
    centroids: &mut [Vec<f64>],
    labels: &mut [usize],
    counts: &mut [usize],
) {
    for g in 0..centroids.len() {
        if counts[g] == 0 {
            let mut farthest = 0;
            let mut far_d = -1.0;
            for (i, p) in points.iter().enumerate() {
                let d = sq_dist(p, &centroids[labels[i]]);
                if d > far_d {
                    far_d = d;
                    farthest = i;
                }
            }
            counts[labels[farthest]] -= 1;
            centroids[g] = points[farthest].clone();
            labels[farthest] = g;
            counts[g] = 1;
        }
    }
}

/// Seeded k-means++ followed by Lloyd iterations.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iters: usize, seed: u64) -> Result<GroupAssignment> {
    let (assignment, _) = kmeans_trace(points, k, max_iters, seed)?;
    Ok(assignment)
}

/// Like [`kmeans`], additionally returning the inertia after every Lloyd
/// iteration (an audit hook: the sequence must be non-increasing).
pub fn kmeans_trace(
    points: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(GroupAssignment, Vec<f64>)> {
    if points.is_empty() {
        return Err(Error::Usage("kmeans needs at least one point".into()));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Usage("kmeans points must share one non-zero dimension".into()));
    }
    if k == 0 {
        return Err(Error::Usage("kmeans needs k >= 1".into()));
    }
    if k > points.len() {
        return Err(Error::Usage(format!(
            "kmeans got k = {k} but only {} points",
            points.len()
        )));
    }
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !distinct.iter().any(|d| *d == p) {
            distinct.push(p);
        }
    }
    if k > distinct.len() {
        return Err(Error::Usage(format!(
            "kmeans got k = {k} but only {} distinct points",
            distinct.len()
        )));
    }

    let mut rng = seeding::stream(seed, "kmeans");

    // k-means++ seeding: first centroid uniform, the rest proportional to
    // squared distance from the nearest chosen centroid.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    while centroids.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[pick].clone());
    }

    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut trace = Vec::new();
    let mut prev_inertia = f64::INFINITY;

    for _ in 0..max_iters {
        // Update step: centroids move to the mean of their members; empty
        // clusters are re-seeded at the point farthest from its assigned
        // centroid, claiming that point immediately.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, &v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for g in 0..k {
            if counts[g] > 0 {
                for s in sums[g].iter_mut() {
                    *s /= counts[g] as f64;
                }
                centroids[g] = sums[g].clone();
            }
        }
        repair_empty_clusters(points, &mut centroids, &mut labels, &mut counts);

        // Assignment step.
        let new_labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        let inertia = assignment_inertia(points, &new_labels, &centroids);
        debug_assert!(
            inertia <= prev_inertia * (1.0 + 1e-12) + 1e-12,
            "Lloyd iteration increased inertia: {prev_inertia} -> {inertia}"
        );
        trace.push(inertia);
        let converged = new_labels == labels;
        labels = new_labels;
        prev_inertia = inertia;
        if converged {
            break;
        }
    }

    let inertia = assignment_inertia(points, &labels, &centroids);
    Ok((GroupAssignment { labels, centroids, n_groups: k, inertia }, trace))
}

/// Checks whether two labelings agree up to a renaming of group indices.
pub fn labels_match_up_to_permutation(a: &[usize], b: &[usize]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut forward: std::collections::BTreeMap<usize, usize> = Default::default();
    let mut backward: std::collections::BTreeMap<usize, usize> = Default::default();
    for (&x, &y) in a.iter().zip(b) {
        if *forward.entry(x).or_insert(y) != y {
            return false;
        }
        if *backward.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_cohort, CohortConfig};
    use crate::nn::Activation;
    use crate::seeding::stream;
    use rand::Rng;

    #[test]
    fn embedding_has_network_output_dim_and_is_deterministic() {
        let mut rng = stream(1, "phi");
        let phi = Mlp::new(&[4, 6, 3], Activation::Relu, Activation::Identity, &mut rng);
        let e1 = embed(&phi, 0, &[1.0, -0.5, 0.25, 2.0]).unwrap();
        let e2 = embed(&phi, 0, &[1.0, -0.5, 0.25, 2.0]).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.vector.len(), 3);
        assert!(embed(&phi, 0, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_weight_phi_embeds_everything_at_the_bias() {
        let mut rng = stream(2, "phi-zero");
        let mut phi = Mlp::new(&[3, 2], Activation::Relu, Activation::Relu, &mut rng);
        phi.layers[0].weight = crate::nn::Matrix::zeros(2, 3);
        phi.layers[0].bias = vec![0.7, -0.3];
        let e = embed(&phi, 5, &[9.0, -4.0, 2.0]).unwrap();
        // relu of the bias.
        assert_eq!(e.vector, vec![0.7, 0.0]);
    }

    #[test]
    fn single_point_single_cluster() {
        let points = vec![vec![2.0, 3.0]];
        let a = kmeans(&points, 1, 50, 0).unwrap();
        assert_eq!(a.labels, vec![0]);
        assert_eq!(a.centroids, vec![vec![2.0, 3.0]]);
        assert_eq!(a.inertia, 0.0);
    }

    #[test]
    fn two_separated_pairs_form_two_clusters() {
        let points = vec![
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![10.0, 10.0],
            vec![10.1, 10.0],
        ];
        let a = kmeans(&points, 2, 100, 3).unwrap();
        assert_eq!(a.labels[0], a.labels[1]);
        assert_eq!(a.labels[2], a.labels[3]);
        assert_ne!(a.labels[0], a.labels[2]);
        for g in 0..2 {
            assert!(!a.group_members(g).is_empty());
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let points = vec![vec![0.0], vec![1.0]];
        assert!(kmeans(&points, 0, 10, 0).is_err());
        assert!(kmeans(&points, 3, 10, 0).is_err());
        assert!(kmeans(&[], 1, 10, 0).is_err());
        // More clusters than distinct points.
        let dup = vec![vec![1.0], vec![1.0], vec![1.0]];
        assert!(matches!(kmeans(&dup, 2, 10, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn kmeans_is_deterministic_per_seed() {
        let mut rng = stream(5, "km-det");
        let points: Vec<Vec<f64>> =
            (0..40).map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        let a = kmeans(&points, 4, 100, 9).unwrap();
        let b = kmeans(&points, 4, 100, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.labels.iter().all(|&l| l < 4));
    }

    #[test]
    fn inertia_trace_is_non_increasing() {
        for seed in 0..8 {
            let mut rng = stream(seed, "km-mono");
            let points: Vec<Vec<f64>> =
                (0..30).map(|_| (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            let (a, trace) = kmeans_trace(&points, 3, 100, seed).unwrap();
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "inertia rose: {:?}", w);
            }
            assert!(a.inertia >= 0.0);
            // Final inertia recomputes from the returned assignment.
            let recomputed: f64 = points
                .iter()
                .zip(&a.labels)
                .map(|(p, &l)| sq_dist(p, &a.centroids[l]))
                .sum();
            assert!((a.inertia - recomputed).abs() < 1e-9);
        }
    }

    /// Exhaustive best 2-partition by inertia, for small N.
    fn brute_force_two_partition(points: &[Vec<f64>]) -> f64 {
        let n = points.len();
        let dim = points[0].len();
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << n) - 1 {
            let mut sums = vec![vec![0.0; dim]; 2];
            let mut counts = [0usize; 2];
            for i in 0..n {
                let side = ((mask >> i) & 1) as usize;
                counts[side] += 1;
                for (s, &v) in sums[side].iter_mut().zip(&points[i]) {
                    *s += v;
                }
            }
            if counts[0] == 0 || counts[1] == 0 {
                continue;
            }
            let centroids: Vec<Vec<f64>> = (0..2)
                .map(|side| sums[side].iter().map(|s| s / counts[side] as f64).collect())
                .collect();
            let inertia: f64 = (0..n)
                .map(|i| sq_dist(&points[i], &centroids[((mask >> i) & 1) as usize]))
                .sum();
            best = best.min(inertia);
        }
        best
    }

    #[test]
    fn kmeans_matches_brute_force_two_partitions() {
        for dataset in 0..10u64 {
            let mut rng = stream(dataset, "km-brute");
            let n = 8 + (dataset as usize % 5);
            let points: Vec<Vec<f64>> =
                (0..n).map(|_| (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let optimum = brute_force_two_partition(&points);
            let mut best_run = f64::INFINITY;
            for restart in 0..8 {
                let a = kmeans(&points, 2, 200, dataset * 100 + restart).unwrap();
                // No assignment can beat the exhaustive optimum; going below
                // it would mean the inertia bookkeeping is broken.
                assert!(
                    a.inertia >= optimum - 1e-9,
                    "dataset {dataset} restart {restart}: inertia {} below optimum {optimum}",
                    a.inertia
                );
                best_run = best_run.min(a.inertia);
            }
            assert!(
                (best_run - optimum).abs() < 1e-9,
                "dataset {dataset}: best of 8 restarts {best_run} misses optimum {optimum}"
            );
        }
    }

    #[test]
    fn planted_groups_recover_exactly_at_six_sigma() {
        let cfg = CohortConfig {
            n_patients: 24,
            n_latent_groups: 3,
            feature_dim: 4,
            feature_noise_std: 1.0,
            feature_mean_sep: 6.0,
            seed: 11,
            ..CohortConfig::default()
        };
        let cohort = generate_cohort(&cfg).unwrap();
        // Identity embedding: cluster the raw features.
        let points: Vec<Vec<f64>> = cohort.patients.iter().map(|p| p.features.clone()).collect();
        let truth: Vec<usize> = cohort.patients.iter().map(|p| p.generator_group).collect();
        let a = kmeans(&points, 3, 100, 0).unwrap();
        assert!(labels_match_up_to_permutation(&a.labels, &truth));
    }

    #[test]
    fn group_members_partition_the_roster() {
        let mut rng = stream(12, "km-members");
        let points: Vec<Vec<f64>> =
            (0..25).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let a = kmeans(&points, 5, 100, 2).unwrap();
        let mut seen = vec![false; 25];
        for g in 0..5 {
            for i in a.group_members(g) {
                assert!(!seen[i]);
                seen[i] = true;
                assert_eq!(a.labels[i], g);
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn assignment_json_round_trip() {
        let points = vec![vec![0.0, 0.0], vec![4.0, 4.0], vec![0.2, -0.1]];
        let a = kmeans(&points, 2, 50, 1).unwrap();
        let restored = GroupAssignment::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, restored);
    }

    #[test]
    fn empty_cluster_repair_claims_the_farthest_point() {
        // Cluster 2 is empty; the farthest point from its centroid is the
        // outlier at (10, 0), currently in cluster 0.
        let points = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![10.0, 0.0], vec![0.0, 1.0]];
        let mut centroids = vec![vec![0.5, 0.0], vec![0.0, 1.0], vec![-50.0, -50.0]];
        let mut labels = vec![0, 0, 0, 1];
        let mut counts = vec![3, 1, 0];
        repair_empty_clusters(&points, &mut centroids, &mut labels, &mut counts);
        assert_eq!(centroids[2], vec![10.0, 0.0]);
        assert_eq!(labels, vec![0, 0, 2, 1]);
        assert_eq!(counts, vec![2, 1, 1]);
    }

    #[test]
    fn repair_handles_two_empty_clusters_without_double_claiming() {
        let points = vec![vec![0.0], vec![8.0], vec![9.0]];
        let mut centroids = vec![vec![0.0], vec![100.0], vec![200.0]];
        let mut labels = vec![0, 0, 0];
        let mut counts = vec![3, 0, 0];
        repair_empty_clusters(&points, &mut centroids, &mut labels, &mut counts);
        // First empty takes the 9.0 outlier; second takes 8.0, now the
        // farthest remaining from its own centroid.
        assert_eq!(centroids[1], vec![9.0]);
        assert_eq!(centroids[2], vec![8.0]);
        assert_eq!(labels, vec![0, 2, 1]);
        assert_eq!(counts, vec![1, 1, 1]);
    }

    #[test]
    fn permutation_matcher_behaves() {
        assert!(labels_match_up_to_permutation(&[0, 0, 1, 1], &[1, 1, 0, 0]));
        assert!(!labels_match_up_to_permutation(&[0, 0, 1, 1], &[0, 1, 0, 1]));
        assert!(!labels_match_up_to_permutation(&[0, 1], &[0, 0]));
        assert!(!labels_match_up_to_permutation(&[0], &[0, 1]));
    }
}
