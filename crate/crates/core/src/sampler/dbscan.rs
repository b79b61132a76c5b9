use std::collections::VecDeque;

use rayon::prelude::*;

use super::{squared_distance, SamplerError};
use crate::data::EmbeddingMatrix;

/// Cluster assignment produced by [`dbscan`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbscanResult {
    /// Cluster id per point, `None` for noise. Ids are contiguous from 0 and
    /// numbered in order of each cluster's lowest core point.
    pub assignment: Vec<Option<usize>>,
    /// `true` for core points.
    pub core: Vec<bool>,
    pub n_clusters: usize,
}

impl DbscanResult {
    pub fn core_ids(&self) -> Vec<usize> {
        (0..self.core.len()).filter(|&i| self.core[i]).collect()
    }

    /// Border and noise points.
    pub fn non_core_ids(&self) -> Vec<usize> {
        (0..self.core.len()).filter(|&i| !self.core[i]).collect()
    }

    pub fn noise_ids(&self) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i].is_none()).collect()
    }
}

fn region(matrix: &EmbeddingMatrix, i: usize, eps_sq: f64) -> impl Iterator<Item = usize> + '_ {
    let point = matrix.row(i);
    (0..matrix.n_rows()).filter(move |&j| squared_distance(point, matrix.row(j)) <= eps_sq)
}

/// DBSCAN under Euclidean distance.
///
/// A point is core when at least `min_pts` points (itself included) lie
/// within `eps`. Clusters are grown breadth-first from unvisited core points
/// in ascending id order; a border point joins the first cluster that reaches
/// it.
pub fn dbscan(matrix: &EmbeddingMatrix, eps: f64, min_pts: usize) -> Result<DbscanResult, SamplerError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(SamplerError::InvalidEps(eps));
    }
    if min_pts == 0 {
        return Err(SamplerError::InvalidMinPts);
    }
    let n = matrix.n_rows();
    let eps_sq = eps * eps;
    let core: Vec<bool> = (0..n)
        .into_par_iter()
        .map(|i| region(matrix, i, eps_sq).take(min_pts).count() >= min_pts)
        .collect();

    let mut assignment = vec![None; n];
    let mut n_clusters = 0;
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if !core[seed] || assignment[seed].is_some() {
            continue;
        }
        let cluster = n_clusters;
        n_clusters += 1;
        assignment[seed] = Some(cluster);
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            for q in region(matrix, p, eps_sq) {
                if assignment[q].is_none() {
                    assignment[q] = Some(cluster);
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    Ok(DbscanResult { assignment, core, n_clusters })
}

/// Radius heuristic: the `quantile` of every point's distance to its
/// `min_pts`-th nearest other point (linear interpolation between order
/// statistics).
pub fn auto_eps(matrix: &EmbeddingMatrix, min_pts: usize, quantile: f64) -> Result<f64, SamplerError> {
    let n = matrix.n_rows();
    if min_pts == 0 {
        return Err(SamplerError::InvalidMinPts);
    }
    if n <= min_pts {
        return Err(SamplerError::TooFewPoints { n, min_pts });
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(SamplerError::InvalidQuantile(quantile));
    }
    let mut k_dist: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let point = matrix.row(i);
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| squared_distance(point, matrix.row(j)))
                .collect();
            let (_, kth, _) = d.select_nth_unstable_by(min_pts - 1, f64::total_cmp);
            kth.sqrt()
        })
        .collect();
    k_dist.sort_unstable_by(f64::total_cmp);
    let pos = quantile * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let eps = k_dist[lo] + (k_dist[hi] - k_dist[lo]) * (pos - lo as f64);
    if eps <= 0.0 {
        return Err(SamplerError::ZeroRadius { min_pts });
    }
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(rows: &[&[f64]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn blobs() -> EmbeddingMatrix {
        let mut rows = Vec::new();
        for (cx, cy) in [(0.0, 0.0), (100.0, 100.0)] {
            for i in 0..10 {
                rows.push(vec![cx + (i % 5) as f64 * 0.1, cy + (i / 5) as f64 * 0.1]);
            }
        }
        EmbeddingMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn two_far_blobs_give_two_clusters() {
        let r = dbscan(&blobs(), 0.15, 3).unwrap();
        assert_eq!(r.n_clusters, 2);
        assert!(r.noise_ids().is_empty());
        assert!(r.assignment[..10].iter().all(|&c| c == Some(0)));
        assert!(r.assignment[10..].iter().all(|&c| c == Some(1)));
    }

    #[test]
    fn lone_point_is_noise() {
        let r = dbscan(&points(&[&[1.0, 2.0]]), 1.0, 4).unwrap();
        assert_eq!(r.assignment, vec![None]);
        assert_eq!(r.core, vec![false]);
        assert_eq!(r.n_clusters, 0);
    }

    #[test]
    fn min_pts_one_makes_everything_core() {
        let m = points(&[&[0.0], &[0.5], &[3.0], &[3.4], &[10.0]]);
        let r = dbscan(&m, 0.6, 1).unwrap();
        assert!(r.core.iter().all(|&c| c));
        assert_eq!(r.assignment, vec![Some(0), Some(0), Some(1), Some(1), Some(2)]);
    }

    #[test]
    fn border_point_joins_first_cluster() {
        // point 4 is within eps of a core point on each side
        let m = points(&[&[0.0], &[0.05], &[0.1], &[0.2], &[1.0], &[1.8], &[1.9], &[1.95], &[2.0]]);
        let r = dbscan(&m, 0.85, 4).unwrap();
        assert!(!r.core[4]);
        assert!(r.core[3] && r.core[5]);
        assert_eq!(r.assignment[4], Some(0));
        assert_eq!(r.n_clusters, 2);
        assert_eq!(r.non_core_ids(), vec![4]);
    }

    #[test]
    fn rejects_bad_parameters() {
        let m = blobs();
        assert_eq!(dbscan(&m, 0.0, 3), Err(SamplerError::InvalidEps(0.0)));
        assert_eq!(dbscan(&m, 1.0, 0), Err(SamplerError::InvalidMinPts));
    }

    #[test]
    fn auto_eps_hand_values() {
        let m = points(&[&[0.0], &[1.0], &[2.0]]);
        assert_eq!(auto_eps(&m, 1, 0.5).unwrap(), 1.0);
        let grid: Vec<Vec<f64>> =
            (0..6).flat_map(|x| (0..6).map(move |y| vec![x as f64 * 0.25, y as f64 * 0.25])).collect();
        let grid = EmbeddingMatrix::from_rows(grid).unwrap();
        assert!((auto_eps(&grid, 1, 0.5).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn auto_eps_degenerate_inputs() {
        let same = points(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(auto_eps(&same, 1, 0.5), Err(SamplerError::ZeroRadius { min_pts: 1 }));
        assert!(matches!(auto_eps(&same, 3, 0.5), Err(SamplerError::TooFewPoints { .. })));
        assert!(auto_eps(&blobs(), 2, 1.5).is_err());
    }
}
