//! k-means (k-means++ seeding, Lloyd iterations, best of several restarts)
//! over adapted embeddings.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingMatrix;
use crate::sampler::squared_distance;
use crate::seed;
use crate::trainer::{Adapter, AdapterError};

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("k = {k} must lie in 1..={n}")]
    InvalidK { k: usize, n: usize },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Convergence threshold on the largest centroid displacement.
    pub tol: f64,
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { max_iter: 300, tol: 1e-6, restarts: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances from each point to its centroid.
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// `utterance_id,cluster_id` rows with a header line.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "utterance_id,cluster_id")?;
        for (id, label) in self.labels.iter().enumerate() {
            writeln!(out, "{id},{label}")?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({ "k": self.k(), "inertia": self.inertia, "iterations": self.iterations })
    }
}

/// Nearest centroid for every point (ties to the lowest centroid id) and the
/// resulting inertia.
pub fn assign(matrix: &EmbeddingMatrix, centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    (0..matrix.n_rows())
        .into_par_iter()
        .map(|i| {
            let point = matrix.row(i);
            let mut best = (f64::INFINITY, 0);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = squared_distance(point, centroid);
                if d < best.0 {
                    best = (d, c);
                }
            }
            (best.1, best.0)
        })
        .unzip()
}

fn plus_plus_init(matrix: &EmbeddingMatrix, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = matrix.n_rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut closest: Vec<f64> = (0..n).map(|i| squared_distance(matrix.row(i), matrix.row(chosen[0]))).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&closest) {
            Ok(dist) => dist.sample(rng),
            // all remaining mass is zero: fewer distinct points than k
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen.push(next);
        let row = matrix.row(next);
        closest.par_iter_mut().enumerate().for_each(|(i, d)| {
            *d = d.min(squared_distance(matrix.row(i), row));
        });
    }
    chosen.into_iter().map(|i| matrix.row(i).to_vec()).collect()
}

fn update_centroids(matrix: &EmbeddingMatrix, labels: &[usize], costs: &[f64], old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = old.len();
    let d = matrix.dim();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (row, &label) in matrix.rows().zip(labels) {
        counts[label] += 1;
        sums[label].iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    // empty clusters are reseeded at the points farthest from their centroid
    let mut donors: Vec<usize> = (0..labels.len()).collect();
    donors.sort_by(|&a, &b| costs[b].total_cmp(&costs[a]).then(a.cmp(&b)));
    let mut donors = donors.into_iter();
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(|(c, (sum, count))| {
            if count > 0 {
                sum.into_iter().map(|s| s / count as f64).collect()
            } else {
                donors.next().map_or_else(|| old[c].clone(), |i| matrix.row(i).to_vec())
            }
        })
        .collect()
}

fn lloyd(matrix: &EmbeddingMatrix, k: usize, seed: u64, cfg: &KMeansConfig) -> ClusterAssignment {
    let mut rng = seed::rng(seed);
    let mut centroids = plus_plus_init(matrix, k, &mut rng);
    let (mut labels, mut costs) = assign(matrix, &centroids);
    let mut history = vec![costs.iter().sum::<f64>()];
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let next = update_centroids(matrix, &labels, &costs, &centroids);
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        (labels, costs) = assign(matrix, &centroids);
        let inertia: f64 = costs.iter().sum();
        let previous = *history.last().expect("history starts non-empty");
        debug_assert!(inertia <= previous * (1.0 + 1e-9) + 1e-12, "lloyd inertia rose: {previous} -> {inertia}");
        history.push(inertia);
        iterations += 1;
        if shift < cfg.tol {
            break;
        }
    }
    let inertia = *history.last().expect("history starts non-empty");
    ClusterAssignment { labels, centroids, inertia, iterations, inertia_history: history }
}

/// k-means with `cfg.restarts` independent k-means++ restarts derived from
/// `seed`; the lowest-inertia run wins (earliest restart on ties).
pub fn kmeans_with(
    matrix: &EmbeddingMatrix,
    k: usize,
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<ClusterAssignment, ClusterError> {
    let n = matrix.n_rows();
    if k == 0 || k > n {
        return Err(ClusterError::InvalidK { k, n });
    }
    let runs: Vec<ClusterAssignment> = (0..cfg.restarts.max(1))
        .into_par_iter()
        .map(|r| lloyd(matrix, k, seed::mix(seed, &[r as u64]), cfg))
        .collect();
    let best = runs
        .into_iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| a.inertia.total_cmp(&b.inertia).then(ia.cmp(ib)))
        .map(|(_, run)| run)
        .expect("at least one restart");
    Ok(best)
}

pub fn kmeans(
    matrix: &EmbeddingMatrix,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterAssignment, ClusterError> {
    kmeans_with(matrix, k, seed, &KMeansConfig { max_iter, tol, ..KMeansConfig::default() })
}

/// Adapt the test embeddings and cluster them.
pub fn predict(
    adapter: &Adapter,
    base_test: &EmbeddingMatrix,
    k: usize,
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<ClusterAssignment, ClusterError> {
    let adapted = adapter.apply(base_test)?;
    kmeans_with(&adapted, k, seed, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn blobs(seed: u64, per: usize, sigma: f64, centers: &[[f64; 3]]) -> (EmbeddingMatrix, Vec<usize>) {
        let mut rng = seed::rng(seed);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                rows.push(center.iter().map(|x| x + sigma * rng.sample::<f64, _>(StandardNormal)).collect());
                truth.push(c);
            }
        }
        (EmbeddingMatrix::from_rows(rows).unwrap(), truth)
    }

    #[test]
    fn k_equal_n_has_zero_inertia() {
        let (m, _) = blobs(1, 4, 1.0, &[[0.0; 3], [5.0; 3]]);
        let r = kmeans(&m, 8, 3, 300, 1e-6).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut labels = r.labels.clone();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels.len(), 8);
    }

    #[test]
    fn k_one_gives_the_mean() {
        let (m, _) = blobs(2, 10, 1.0, &[[0.0; 3], [4.0, 1.0, -2.0]]);
        let r = kmeans(&m, 1, 0, 300, 1e-6).unwrap();
        let n = m.n_rows() as f64;
        for j in 0..3 {
            let mean = m.rows().map(|row| row[j]).sum::<f64>() / n;
            assert!((r.centroids[0][j] - mean).abs() < 1e-12);
        }
        let total: f64 = m.rows().map(|row| squared_distance(row, &r.centroids[0])).sum();
        assert!((r.inertia - total).abs() < 1e-9);
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let (m, truth) = blobs(3, 30, 0.5, &[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]]);
        let r = kmeans(&m, 3, 7, 300, 1e-6).unwrap();
        assert_eq!(crate::metrics::hungarian_acc(&truth, &r.labels).unwrap(), 1.0);
    }

    #[test]
    fn lloyd_is_monotone_and_assignment_is_optimal() {
        let (m, _) = blobs(4, 40, 2.0, &[[0.0; 3], [3.0; 3], [-3.0, 3.0, 0.0], [1.0, -4.0, 2.0]]);
        let r = kmeans_with(&m, 4, 11, &KMeansConfig::default()).unwrap();
        assert!(r.inertia_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        let mut total = 0.0;
        for (i, row) in m.rows().enumerate() {
            let own = squared_distance(row, &r.centroids[r.labels[i]]);
            total += own;
            for c in &r.centroids {
                assert!(own <= squared_distance(row, c) + 1e-9);
            }
        }
        assert!((total - r.inertia).abs() < 1e-9);
    }

    #[test]
    fn deterministic_under_seed() {
        let (m, _) = blobs(5, 20, 1.5, &[[0.0; 3], [2.0; 3], [4.0; 3]]);
        let a = kmeans(&m, 3, 9, 300, 1e-6).unwrap();
        let b = kmeans(&m, 3, 9, 300, 1e-6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_points_do_not_break_seeding() {
        let m = EmbeddingMatrix::from_rows(vec![vec![1.0, 1.0]; 5]).unwrap();
        let r = kmeans(&m, 3, 0, 50, 1e-6).unwrap();
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn invalid_k() {
        let (m, _) = blobs(6, 2, 1.0, &[[0.0; 3]]);
        assert!(matches!(kmeans(&m, 3, 0, 10, 1e-6), Err(ClusterError::InvalidK { k: 3, n: 2 })));
        assert!(kmeans(&m, 0, 0, 10, 1e-6).is_err());
    }

    #[test]
    fn identity_adapter_prediction_matches_plain_kmeans() {
        let (m, _) = blobs(8, 15, 1.0, &[[0.0; 3], [5.0; 3]]);
        let adapter = Adapter::residual(3, 4, 1);
        let cfg = KMeansConfig::default();
        assert_eq!(predict(&adapter, &m, 2, 5, &cfg).unwrap(), kmeans_with(&m, 2, 5, &cfg).unwrap());
        let wrong = Adapter::residual(4, 4, 1);
        assert!(predict(&wrong, &m, 2, 5, &cfg).is_err());
    }

    #[test]
    fn csv_export() {
        let r = ClusterAssignment {
            labels: vec![1, 0],
            centroids: vec![vec![0.0], vec![1.0]],
            inertia: 0.0,
            iterations: 1,
            inertia_history: vec![0.0],
        };
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "utterance_id,cluster_id\n0,1\n1,0\n");
        assert_eq!(r.summary_json()["k"], 2);
    }
}
