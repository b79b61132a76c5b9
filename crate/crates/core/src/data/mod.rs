//! Utterance datasets, split bookkeeping, label visibility and embedding
//! matrices.

mod dataset;
mod embeddings;
mod remote;

pub use dataset::{
    load_dataset, parse_records, write_dataset, write_records, DataError, DatasetBundle,
    DatasetFormat, DatasetSummary, IntentSets, Mode, Record, Split, Utterance,
};
pub use embeddings::{
    fingerprint_texts, load_embeddings, read_embeddings, write_embeddings_binary,
    write_embeddings_csv, EmbeddingError, EmbeddingMatrix, EMBEDDING_MAGIC,
};
pub(crate) use remote::classify_http_error;
pub use remote::{
    fetch_embeddings, EmbeddingCache, EmbeddingService, EmbeddingServiceConfig,
    EmbeddingTransport, HttpEmbeddingTransport, RemoteEmbeddingError,
};
