use serde::{Deserialize, Serialize};

use super::{build_triplets, train_epoch, Adapter, AdapterError, EpochReport, TrainConfig, TrainError, TripletSet};
use crate::data::{DatasetBundle, EmbeddingMatrix};
use crate::oracle::{OracleError, OracleSession};
use crate::sampler::{dedup_pairs, sample_density_pairs, sample_knn_pairs, DensityWarning, PairSource, SamplerConfig, SamplerError};

/// Which pair sources feed the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// KNN pairs only.
    LanidNear,
    /// Density pairs only.
    LanidDbscan,
    /// Both sources.
    #[default]
    LanidBoth,
}

impl Variant {
    pub fn uses_knn(self) -> bool {
        matches!(self, Self::LanidNear | Self::LanidBoth)
    }

    pub fn uses_density(self) -> bool {
        matches!(self, Self::LanidDbscan | Self::LanidBoth)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LanidNear => "lanid_near",
            Self::LanidDbscan => "lanid_dbscan",
            Self::LanidBoth => "lanid_both",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lanid_near" | "near" => Ok(Self::LanidNear),
            "lanid_dbscan" | "dbscan" => Ok(Self::LanidDbscan),
            "lanid_both" | "lanid" | "both" => Ok(Self::LanidBoth),
            other => Err(format!("unknown variant {other:?} (expected lanid_near, lanid_dbscan or lanid_both)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoopError {
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("first sampling round produced no training triplets ({0}); nothing to train on")]
    EmptyFirstRound(String),
    #[error("base embeddings have {rows} rows but the training split has {train} utterances")]
    Misaligned { rows: usize, train: usize },
}

/// One sample → annotate → train round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub start_epoch: usize,
    pub knn_invoked: bool,
    pub density_invoked: bool,
    pub knn_pairs: usize,
    pub density_pairs: usize,
    /// Pairs sent for labelling after cross-source deduplication.
    pub pairs: usize,
    pub labeled: usize,
    pub positives: usize,
    pub positive_rate: f64,
    /// Label accuracy against hidden ground truth, when every pair has one.
    pub label_accuracy: Option<f64>,
    pub failed: usize,
    pub dispatched: usize,
    pub cache_hits: usize,
    pub shortcut: usize,
    pub new_triplets: usize,
    pub df_size: usize,
    pub eps: Option<f64>,
    pub density_clusters: Option<usize>,
    pub density_warning: Option<DensityWarning>,
    pub warning: Option<String>,
    pub epochs: Vec<EpochReport>,
}

#[derive(Debug, Clone)]
pub struct LoopOutcome {
    pub adapter: Adapter,
    pub log: Vec<IterationLog>,
}

/// Run the iterative loop over the training split. `base` holds the frozen
/// training embeddings, row `i` belonging to training id `i`. Sampling rounds
/// start at epochs `0, T, 2T, ...`; each round samples on the current adapted
/// embeddings, labels the new pairs, appends their triplets to the
/// accumulated set and trains for up to `T` epochs on all of it.
pub fn run_loop(
    bundle: &DatasetBundle,
    base: &EmbeddingMatrix,
    variant: Variant,
    sampler_cfg: &SamplerConfig,
    oracle: &OracleSession<'_>,
    train_cfg: &TrainConfig,
) -> Result<LoopOutcome, LoopError> {
    if base.n_rows() != bundle.train.len() {
        return Err(LoopError::Misaligned { rows: base.n_rows(), train: bundle.train.len() });
    }
    let dim = base.dim();
    let mut adapter = Adapter::new(train_cfg.adapter, dim, train_cfg.hidden_dim, train_cfg.seed);
    let mut d_f = TripletSet::new();
    let mut log = Vec::new();
    let period = train_cfg.resample_period.max(1);
    let mut epoch = 0;
    let mut iteration = 0;

    while epoch < train_cfg.epochs {
        let adapted = adapter.apply(base)?;
        let mut entry = IterationLog {
            iteration,
            start_epoch: epoch,
            knn_invoked: variant.uses_knn(),
            density_invoked: variant.uses_density(),
            knn_pairs: 0,
            density_pairs: 0,
            pairs: 0,
            labeled: 0,
            positives: 0,
            positive_rate: 0.0,
            label_accuracy: None,
            failed: 0,
            dispatched: 0,
            cache_hits: 0,
            shortcut: 0,
            new_triplets: 0,
            df_size: 0,
            eps: None,
            density_clusters: None,
            density_warning: None,
            warning: None,
            epochs: Vec::new(),
        };

        let mut candidates = Vec::new();
        if variant.uses_knn() {
            let pairs = sample_knn_pairs(&adapted, sampler_cfg, iteration)?;
            entry.knn_pairs = pairs.len();
            candidates.extend(pairs);
        }
        if variant.uses_density() {
            let sample = sample_density_pairs(&adapted, sampler_cfg, iteration)?;
            entry.density_pairs = sample.pairs.len();
            entry.eps = Some(sample.eps);
            entry.density_clusters = Some(sample.clustering.n_clusters);
            entry.density_warning = sample.warning;
            candidates.extend(sample.pairs);
        }
        let candidates = dedup_pairs(candidates);
        debug_assert!(candidates.iter().all(|p| match p.source {
            PairSource::Knn => variant.uses_knn(),
            PairSource::Density => variant.uses_density(),
        }));
        entry.pairs = candidates.len();

        let triplets = if candidates.is_empty() {
            Err(TrainError::EmptyTrainingSet)
        } else {
            let outcome = oracle.annotate(&candidates, bundle)?;
            entry.labeled = outcome.labels.len();
            entry.positives = outcome.labels.iter().filter(|l| l.r == 1).count();
            entry.positive_rate =
                if entry.labeled == 0 { 0.0 } else { entry.positives as f64 / entry.labeled as f64 };
            entry.failed = outcome.failed.len();
            entry.dispatched = outcome.dispatched;
            entry.cache_hits = outcome.cache_hits;
            entry.shortcut = outcome.shortcut;
            entry.label_accuracy = label_accuracy(bundle, &outcome.labels);
            build_triplets(&outcome.labels, bundle.train.len(), train_cfg, iteration)
        };
        match triplets {
            Ok(triplets) => entry.new_triplets = d_f.extend(triplets),
            Err(TrainError::EmptyTrainingSet) if iteration == 0 => {
                return Err(LoopError::EmptyFirstRound(format!(
                    "{} pairs sampled, {} labelled, {} positive",
                    entry.pairs, entry.labeled, entry.positives
                )));
            }
            Err(TrainError::EmptyTrainingSet) => {
                let message = "refresh produced no positive pairs; training on accumulated D_f".to_string();
                tracing::warn!(iteration, "{message}");
                entry.warning = Some(message);
            }
            Err(other) => return Err(other.into()),
        }
        entry.df_size = d_f.len();
        if d_f.is_empty() {
            return Err(LoopError::EmptyFirstRound("accumulated D_f is empty".into()));
        }

        let stop = (epoch + period).min(train_cfg.epochs);
        while epoch < stop {
            let report = train_epoch(&mut adapter, d_f.as_slice(), base, train_cfg, epoch)?;
            tracing::debug!(iteration, epoch, loss = report.mean_loss, active = report.active_fraction, "epoch done");
            entry.epochs.push(report);
            epoch += 1;
        }
        tracing::info!(
            iteration,
            pairs = entry.pairs,
            positives = entry.positives,
            new_triplets = entry.new_triplets,
            df = entry.df_size,
            "sampling round finished"
        );
        log.push(entry);
        iteration += 1;
    }
    Ok(LoopOutcome { adapter, log })
}

fn label_accuracy(bundle: &DatasetBundle, labels: &[crate::oracle::RelationLabel]) -> Option<f64> {
    if labels.is_empty() {
        return None;
    }
    let mut correct = 0usize;
    for label in labels {
        let a = bundle.true_label(label.pair.anchor_id)?;
        let b = bundle.true_label(label.pair.other_id)?;
        correct += usize::from((a == b) == (label.r == 1));
    }
    Some(correct as f64 / labels.len() as f64)
}
