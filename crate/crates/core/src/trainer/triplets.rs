use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::oracle::RelationLabel;
use crate::seed;

const MAX_NEGATIVE_TRIES: usize = 100;

/// `(anchor, positive, negative)` training ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// For every positive relation label emit `k_n` triplets whose negatives are
/// drawn uniformly from the `n_train` training ids, excluding the anchor and
/// the positive. Negatives that keep colliding are skipped after a bounded
/// number of redraws.
pub fn build_triplets(
    labels: &[RelationLabel],
    n_train: usize,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<Vec<Triplet>, TrainError> {
    let positives: Vec<&RelationLabel> = labels.iter().filter(|l| l.r == 1).collect();
    if positives.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut rng = seed::rng(seed::mix(cfg.seed, &[iteration as u64, 0x6e6567]));
    let mut out = Vec::with_capacity(positives.len() * cfg.k_n);
    for label in positives {
        let (anchor, positive) = (label.pair.anchor_id, label.pair.other_id);
        for _ in 0..cfg.k_n {
            let negative = (0..MAX_NEGATIVE_TRIES)
                .map(|_| rng.random_range(0..n_train))
                .find(|&n| n != anchor && n != positive);
            match negative {
                Some(negative) => out.push(Triplet { anchor, positive, negative }),
                None => tracing::warn!(anchor, positive, "no admissible negative found, skipping"),
            }
        }
    }
    Ok(out)
}

/// The accumulated fine-tuning set: insertion ordered, never shrinking,
/// without duplicate triplets.
#[derive(Debug, Clone, Default)]
pub struct TripletSet {
    items: Vec<Triplet>,
    seen: HashSet<Triplet>,
}

impl TripletSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append unseen triplets; returns how many were new.
    pub fn extend(&mut self, triplets: impl IntoIterator<Item = Triplet>) -> usize {
        let before = self.items.len();
        for t in triplets {
            if self.seen.insert(t) {
                self.items.push(t);
            }
        }
        self.items.len() - before
    }

    pub fn as_slice(&self) -> &[Triplet] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
