//! Relation labelling of candidate pairs: prompt construction, response
//! parsing, live or simulated oracle backends, a persistent label cache,
//! and schema selection on labelled data.

mod annotate;
mod backend;
mod cache;
mod prompt;

pub use annotate::{
    annotate_pairs, select_schema, AnnotationOutcome, FailedPair, OracleConfig, OracleError, OracleSession,
    Provider, ProviderKind, RelationLabel, SchemaSelection,
};
pub use backend::{
    simulated_flip, HttpChatBackend, OracleBackend, OracleQuery, SimulatedOracle,
};
pub use cache::{CachedLabel, LabelCache};
pub use prompt::{build_prompt, parse_response, PromptError, PromptTemplate, REGULATION_PHRASE};
