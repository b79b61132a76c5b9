use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::accumulate_triplet_grad;
use super::{triplet_loss, Adapter, AdapterKind, Triplet};
use crate::data::EmbeddingMatrix;
use crate::seed;

/// Triplets whose gradients are summed sequentially by one worker; partial
/// sums are then reduced in chunk order so results do not depend on the
/// thread count.
const REDUCTION_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("empty D_f: no positive pairs to build triplets from")]
    EmptyTrainingSet,
    #[error("no triplets to train on")]
    NoTriplets,
    #[error("non-finite loss in epoch {epoch}, batch {batch} (learning rate {learning_rate} too high?)")]
    NonFinite { epoch: usize, batch: usize, learning_rate: f64 },
    #[error("triplet references id {id} but only {n} base embeddings exist")]
    OutOfRange { id: usize, n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Negatives drawn per positive pair.
    pub k_n: usize,
    pub margin: f64,
    /// Pairs are resampled every `resample_period` epochs.
    pub resample_period: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adapter: AdapterKind,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_n: 2,
            margin: 0.5,
            resample_period: 3,
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 64,
            adapter: AdapterKind::Residual,
            hidden_dim: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.k_n == 0 {
            out.push("k_n: must be >= 1".to_string());
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            out.push(format!("margin: must be a finite value >= 0, got {}", self.margin));
        }
        if self.resample_period == 0 {
            out.push("resample_period: T must be >= 1".to_string());
        }
        if self.epochs == 0 {
            out.push("epochs: must be >= 1".to_string());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate: must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            out.push("batch_size: must be >= 1".to_string());
        }
        if self.adapter == AdapterKind::Residual && self.hidden_dim == 0 {
            out.push("hidden_dim: residual adapter needs a positive hidden width".to_string());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean loss over the pass, each batch measured before its update.
    pub mean_loss: f64,
    /// Fraction of triplets with a strictly positive loss.
    pub active_fraction: f64,
}

/// Mean triplet loss of the current adapter over `triplets`.
pub fn evaluate_loss(adapter: &Adapter, triplets: &[Triplet], base: &EmbeddingMatrix, margin: f64) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    let adapted = |id: usize| adapter.forward(base.row(id));
    let losses: Vec<f64> = triplets
        .par_iter()
        .map(|t| triplet_loss(&adapted(t.anchor), &adapted(t.positive), &adapted(t.negative), margin))
        .collect();
    losses.iter().sum::<f64>() / triplets.len() as f64
}

/// One seeded-shuffled pass of mini-batch gradient descent on the mean
/// batch loss. Parameters are updated in place.
pub fn train_epoch(
    adapter: &mut Adapter,
    triplets: &[Triplet],
    base: &EmbeddingMatrix,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochReport, TrainError> {
    if triplets.is_empty() {
        return Err(TrainError::NoTriplets);
    }
    let n = base.n_rows();
    if let Some(bad) = triplets.iter().flat_map(|t| [t.anchor, t.positive, t.negative]).find(|&id| id >= n) {
        return Err(TrainError::OutOfRange { id: bad, n });
    }
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    order.shuffle(&mut seed::rng(seed::mix(cfg.seed, &[epoch as u64, 0x65706f])));

    let mut total_loss = 0.0;
    let mut active = 0usize;
    for (batch_index, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
        let partials: Vec<(f64, usize, Adapter)> = batch
            .par_chunks(REDUCTION_CHUNK)
            .map(|chunk| {
                let mut grad = adapter.zeros_like();
                let mut loss = 0.0;
                let mut hits = 0;
                for &i in chunk {
                    let l = accumulate_triplet_grad(adapter, &triplets[i], base, cfg.margin, &mut grad);
                    loss += l;
                    hits += usize::from(l > 0.0);
                }
                (loss, hits, grad)
            })
            .collect();
        let mut grad = adapter.zeros_like();
        let mut batch_loss = 0.0;
        for (loss, hits, partial) in &partials {
            batch_loss += loss;
            active += hits;
            grad.add_scaled(1.0, partial);
        }
        if !batch_loss.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: batch_index, learning_rate: cfg.learning_rate });
        }
        total_loss += batch_loss;
        if cfg.learning_rate != 0.0 {
            adapter.add_scaled(-cfg.learning_rate / batch.len() as f64, &grad);
            if !adapter.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: batch_index, learning_rate: cfg.learning_rate });
            }
        }
    }
    let report = EpochReport {
        epoch,
        mean_loss: total_loss / triplets.len() as f64,
        active_fraction: active as f64 / triplets.len() as f64,
    };
    tracing::debug!(epoch, loss = report.mean_loss, active = report.active_fraction, "epoch done");
    Ok(report)
}
