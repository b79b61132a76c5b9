//! LLM-assisted new intent discovery.
//!
//! The pipeline alternates between four stages over a frozen base embedding:
//! select informative utterance pairs (local KNN neighbourhoods and global
//! DBSCAN density structure), ask a relation oracle whether each pair shares
//! an intent, distil the positive answers into a small embedding adapter with
//! a triplet margin loss, and finally cluster the adapted test embeddings with
//! k-means. Clusterings are scored with NMI, ARI and Hungarian-matched accuracy.

pub mod cluster;
pub mod config;
pub mod data;
pub mod exec;
pub mod metrics;
pub mod oracle;
pub mod runner;
pub mod sampler;
pub mod seed;
pub mod synthetic;
pub mod trainer;

pub use cluster::{kmeans, predict, ClusterAssignment, KMeansConfig};
pub use config::{Preset, RunConfig, Variant};
pub use data::{DatasetBundle, EmbeddingMatrix, Mode, Utterance};
pub use metrics::{ari, hungarian_acc, nmi, ScoreReport};
pub use oracle::{parse_response, PromptTemplate, RelationLabel};
pub use sampler::{dbscan, CandidatePair, DbscanResult, PairSource, SamplerConfig};
pub use trainer::{triplet_loss, Adapter, TrainConfig, Triplet};
