//! Candidate pair selection from the current representation: local KNN
//! neighbourhoods and global DBSCAN density structure.

mod dbscan;
mod knn;
mod pairs;

pub use dbscan::{auto_eps, dbscan, DbscanResult};
pub use knn::{knn_query, nearest_among};
pub use pairs::{
    dedup_pairs, sample_density_pairs, sample_knn_pairs, CandidatePair, DensitySample,
    DensityWarning, PairSource, SamplerConfig,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SamplerError {
    #[error("k = {k} must be smaller than the number of points ({n})")]
    KTooLarge { k: usize, n: usize },
    #[error("query id {id} out of range for {n} points")]
    UnknownId { id: usize, n: usize },
    #[error("eps must be positive and finite, got {0}")]
    InvalidEps(f64),
    #[error("min_pts must be at least 1")]
    InvalidMinPts,
    #[error("auto eps needs more than min_pts ({min_pts}) points, got {n}")]
    TooFewPoints { n: usize, min_pts: usize },
    #[error("quantile must lie in [0, 1], got {0}")]
    InvalidQuantile(f64),
    #[error("zero radius: points are degenerate (all {min_pts}-nearest distances are zero)")]
    ZeroRadius { min_pts: usize },
    #[error("invalid sampler config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
