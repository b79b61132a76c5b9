use std::collections::HashSet;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{auto_eps, dbscan, knn_query, nearest_among, DbscanResult, SamplerError};
use crate::data::EmbeddingMatrix;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSource {
    Knn,
    Density,
}

/// A candidate utterance pair over training ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CandidatePair {
    pub anchor_id: usize,
    pub other_id: usize,
    pub source: PairSource,
    pub iteration: usize,
}

impl CandidatePair {
    /// Unordered identity: `(a, b)` and `(b, a)` share a key.
    pub fn key(&self) -> (usize, usize) {
        (self.anchor_id.min(self.other_id), self.anchor_id.max(self.other_id))
    }
}

/// Keep the first occurrence of every unordered pair, dropping self-pairs.
pub fn dedup_pairs(pairs: impl IntoIterator<Item = CandidatePair>) -> Vec<CandidatePair> {
    let mut seen = HashSet::new();
    pairs
        .into_iter()
        .filter(|p| p.anchor_id != p.other_id && seen.insert(p.key()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Neighbourhood size `K`.
    pub k: usize,
    /// Fraction of anchors sampled per round, `0 < p <= 1`.
    pub p: f64,
    /// Neighbours drawn per KNN anchor, `n_k < K`.
    pub n_k: usize,
    /// Core neighbours per sampled non-core point.
    pub m: usize,
    pub min_pts: usize,
    /// Fixed DBSCAN radius; `None` derives it with [`auto_eps`].
    pub eps: Option<f64>,
    pub eps_quantile: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { k: 50, p: 0.1, n_k: 2, m: 5, min_pts: 4, eps: None, eps_quantile: 0.5, seed: 0 }
    }
}

impl SamplerConfig {
    /// Every violated invariant, as `field: rule`.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.k == 0 {
            out.push("knn_k: K must be positive".to_string());
        }
        if self.n_k == 0 {
            out.push("n_k: must be positive".to_string());
        }
        if self.n_k >= self.k {
            out.push("n_k: n_k must be < K".to_string());
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            out.push(format!("p: must lie in (0, 1], got {}", self.p));
        }
        if self.m == 0 {
            out.push("density_m: m must be positive".to_string());
        }
        if self.min_pts == 0 {
            out.push("min_pts: must be positive".to_string());
        }
        if let Some(eps) = self.eps {
            if !(eps > 0.0 && eps.is_finite()) {
                out.push(format!("eps: must be positive and finite, got {eps}"));
            }
        }
        if !(0.0..=1.0).contains(&self.eps_quantile) {
            out.push(format!("eps_quantile: must lie in [0, 1], got {}", self.eps_quantile));
        }
        out
    }

    fn check(&self) -> Result<(), SamplerError> {
        let violations = self.violations();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(SamplerError::InvalidConfig(violations))
        }
    }
}

fn sample_count(p: f64, n: usize) -> usize {
    // guard against p * n landing a hair above an integer
    ((p * n as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Local pairs: `ceil(p * n)` seeded anchors, each paired with `n_k`
/// neighbours drawn uniformly without replacement from its top-`K`
/// neighbourhood. Output is ordered by anchor id and deduplicated.
pub fn sample_knn_pairs(
    matrix: &EmbeddingMatrix,
    cfg: &SamplerConfig,
    iteration: usize,
) -> Result<Vec<CandidatePair>, SamplerError> {
    cfg.check()?;
    let n = matrix.n_rows();
    if cfg.k >= n {
        return Err(SamplerError::KTooLarge { k: cfg.k, n });
    }
    let count = sample_count(cfg.p, n);
    let mut rng = seed::rng(seed::mix(cfg.seed, &[iteration as u64, 0x6b6e6e]));
    let mut anchors = index::sample(&mut rng, n, count).into_vec();
    anchors.sort_unstable();

    let per_anchor: Vec<Vec<CandidatePair>> = anchors
        .par_iter()
        .map(|&anchor| {
            let neighbours = knn_query(matrix, anchor, cfg.k)?;
            let mut rng = seed::rng(seed::mix(cfg.seed, &[iteration as u64, anchor as u64, 1]));
            let mut picks = index::sample(&mut rng, neighbours.len(), cfg.n_k).into_vec();
            picks.sort_unstable();
            Ok(picks
                .into_iter()
                .map(|rank| CandidatePair {
                    anchor_id: anchor,
                    other_id: neighbours[rank],
                    source: PairSource::Knn,
                    iteration,
                })
                .collect())
        })
        .collect::<Result<_, SamplerError>>()?;
    Ok(dedup_pairs(per_anchor.into_iter().flatten()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityWarning {
    /// Every point is noise; nothing to pair with.
    NoCorePoints,
    /// Every point is core; no non-core anchors.
    NoNonCorePoints,
}

#[derive(Debug, Clone)]
pub struct DensitySample {
    pub pairs: Vec<CandidatePair>,
    pub clustering: DbscanResult,
    pub eps: f64,
    pub warning: Option<DensityWarning>,
}

/// Global-density pairs: run DBSCAN, sample `ceil(p * |non-core|)` non-core
/// points and pair each with its `m` nearest core points.
pub fn sample_density_pairs(
    matrix: &EmbeddingMatrix,
    cfg: &SamplerConfig,
    iteration: usize,
) -> Result<DensitySample, SamplerError> {
    cfg.check()?;
    let eps = match cfg.eps {
        Some(eps) => eps,
        None => auto_eps(matrix, cfg.min_pts, cfg.eps_quantile)?,
    };
    let clustering = dbscan(matrix, eps, cfg.min_pts)?;
    let cores = clustering.core_ids();
    let non_core = clustering.non_core_ids();
    let warning = if cores.is_empty() {
        Some(DensityWarning::NoCorePoints)
    } else if non_core.is_empty() {
        Some(DensityWarning::NoNonCorePoints)
    } else {
        None
    };
    if let Some(warning) = warning {
        tracing::warn!(?warning, eps, iteration, "density sampler produced no pairs");
        return Ok(DensitySample { pairs: Vec::new(), clustering, eps, warning: Some(warning) });
    }

    let count = sample_count(cfg.p, non_core.len());
    let mut rng = seed::rng(seed::mix(cfg.seed, &[iteration as u64, 0x64656e]));
    let mut anchors: Vec<usize> = index::sample(&mut rng, non_core.len(), count)
        .into_iter()
        .map(|i| non_core[i])
        .collect();
    anchors.sort_unstable();

    let per_anchor: Vec<Vec<CandidatePair>> = anchors
        .par_iter()
        .map(|&anchor| {
            nearest_among(matrix, matrix.row(anchor), cores.iter().copied(), cfg.m)
                .into_iter()
                .map(|core| CandidatePair {
                    anchor_id: anchor,
                    other_id: core,
                    source: PairSource::Density,
                    iteration,
                })
                .collect()
        })
        .collect();
    Ok(DensitySample { pairs: dedup_pairs(per_anchor.into_iter().flatten()), clustering, eps, warning: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = seed::rng(seed);
        EmbeddingMatrix::from_rows((0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .unwrap()
    }

    fn cfg(k: usize, p: f64, n_k: usize) -> SamplerConfig {
        SamplerConfig { k, p, n_k, ..SamplerConfig::default() }
    }

    fn dist(m: &EmbeddingMatrix, a: usize, b: usize) -> f64 {
        super::super::squared_distance(m.row(a), m.row(b)).sqrt()
    }

    #[test]
    fn knn_pair_counts() {
        let m = random_matrix(100, 4, 1);
        let pairs = sample_knn_pairs(&m, &cfg(10, 0.1, 2), 0).unwrap();
        let anchors: HashSet<usize> = pairs.iter().map(|p| p.anchor_id).collect();
        assert!(anchors.len() <= 10);
        assert!(pairs.len() <= 20 && pairs.len() >= 10);
        assert!(pairs.iter().all(|p| p.source == PairSource::Knn && p.anchor_id != p.other_id));
    }

    #[test]
    fn knn_pairs_stay_inside_the_neighbourhood() {
        let m = random_matrix(120, 6, 2);
        let c = cfg(15, 0.3, 4);
        for pair in sample_knn_pairs(&m, &c, 3).unwrap() {
            let top = knn_query(&m, pair.anchor_id, c.k).unwrap();
            assert!(top.contains(&pair.other_id));
            let kth = *top.last().unwrap();
            assert!(dist(&m, pair.anchor_id, pair.other_id) <= dist(&m, pair.anchor_id, kth));
        }
    }

    #[test]
    fn sampling_is_deterministic_and_iteration_dependent() {
        let m = random_matrix(80, 3, 3);
        let c = cfg(10, 0.2, 3);
        assert_eq!(sample_knn_pairs(&m, &c, 1).unwrap(), sample_knn_pairs(&m, &c, 1).unwrap());
        let a: Vec<_> = sample_knn_pairs(&m, &c, 1).unwrap().iter().map(|p| p.key()).collect();
        let b: Vec<_> = sample_knn_pairs(&m, &c, 2).unwrap().iter().map(|p| p.key()).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn knn_preconditions() {
        let m = random_matrix(10, 2, 4);
        assert!(matches!(sample_knn_pairs(&m, &cfg(10, 0.5, 2), 0), Err(SamplerError::KTooLarge { .. })));
        assert!(matches!(sample_knn_pairs(&m, &cfg(3, 0.5, 3), 0), Err(SamplerError::InvalidConfig(_))));
        assert!(sample_knn_pairs(&m, &cfg(3, 0.0, 2), 0).is_err());
    }

    #[test]
    fn dedup_is_unordered() {
        let p = |a, b| CandidatePair { anchor_id: a, other_id: b, source: PairSource::Knn, iteration: 0 };
        let out = dedup_pairs([p(1, 2), p(2, 1), p(3, 3), p(2, 3)]);
        assert_eq!(out, vec![p(1, 2), p(2, 3)]);
    }

    #[test]
    fn density_pairs_join_non_core_to_nearest_cores() {
        let m = random_matrix(150, 3, 5);
        let c = SamplerConfig { p: 0.5, m: 3, min_pts: 4, ..SamplerConfig::default() };
        let sample = sample_density_pairs(&m, &c, 0).unwrap();
        assert!(sample.warning.is_none());
        assert!(!sample.pairs.is_empty());
        let cores = sample.clustering.core_ids();
        for anchor in sample.pairs.iter().map(|p| p.anchor_id).collect::<HashSet<_>>() {
            assert!(!sample.clustering.core[anchor]);
            let mut brute: Vec<(f64, usize)> = cores.iter().map(|&j| (dist(&m, anchor, j), j)).collect();
            brute.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expected: Vec<usize> = brute.iter().take(3).map(|x| x.1).collect();
            let got: Vec<usize> =
                sample.pairs.iter().filter(|p| p.anchor_id == anchor).map(|p| p.other_id).collect();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn dense_blob_has_no_non_core_points() {
        let m = random_matrix(30, 2, 6);
        let c = SamplerConfig { eps: Some(100.0), ..SamplerConfig::default() };
        let sample = sample_density_pairs(&m, &c, 0).unwrap();
        assert!(sample.pairs.is_empty());
        assert_eq!(sample.warning, Some(DensityWarning::NoNonCorePoints));
    }

    #[test]
    fn all_noise_has_no_core_points() {
        let m = random_matrix(30, 2, 7);
        let c = SamplerConfig { eps: Some(1e-6), ..SamplerConfig::default() };
        let sample = sample_density_pairs(&m, &c, 0).unwrap();
        assert!(sample.pairs.is_empty());
        assert_eq!(sample.warning, Some(DensityWarning::NoCorePoints));
    }

    #[test]
    fn config_violation_messages() {
        let v = cfg(2, 0.1, 2).violations();
        assert!(v.iter().any(|s| s.contains("n_k must be < K")));
        assert!(SamplerConfig::default().violations().is_empty());
        assert_eq!(sample_count(0.1, 100), 10);
        assert_eq!(sample_count(0.1, 101), 11);
        assert_eq!(sample_count(0.001, 10), 1);
    }
}
