//! Triplet construction, the triplet margin loss with exact gradients
//! through a small adapter over frozen embeddings, mini-batch training and
//! the iterative sample → annotate → train loop.

mod adapter;
mod checkpoint;
mod loss;
mod run_loop;
mod train;
mod triplets;

pub use adapter::{Adapter, AdapterError, AdapterKind, Affine};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use loss::{output_gradients, triplet_loss, triplet_loss_grad};
pub use run_loop::{run_loop, IterationLog, LoopError, LoopOutcome, Variant};
pub use train::{evaluate_loss, train_epoch, EpochReport, TrainConfig, TrainError};
pub use triplets::{build_triplets, Triplet, TripletSet};
