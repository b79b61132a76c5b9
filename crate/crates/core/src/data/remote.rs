use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbeddingError, EmbeddingMatrix};
use crate::exec::{self, RetryPolicy, TransportError};

/// Upper bound on texts per request accepted by [`EmbeddingServiceConfig`].
pub const MAX_BATCH_SIZE: usize = 2048;

#[derive(Debug, thiserror::Error)]
pub enum RemoteEmbeddingError {
    #[error("embedding transport failed after {attempts} attempt(s): {source}")]
    Transport {
        attempts: u32,
        #[source]
        source: TransportError,
    },
    #[error("service returned {found} vectors for a batch of {expected} texts")]
    PartialBatch { expected: usize, found: usize },
    #[error("batch size {0} outside 1..={MAX_BATCH_SIZE}")]
    BatchSize(usize),
    #[error("cache io error on {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Matrix(#[from] EmbeddingError),
}

/// Something that turns a batch of texts into vectors, in order.
pub trait EmbeddingTransport: Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, TransportError>;
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// JSON-over-HTTP transport: `POST {"texts":[...]}` answered by
/// `{"vectors":[[...],...]}`.
pub struct HttpEmbeddingTransport {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpEmbeddingTransport {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs(60)))
            .build()
            .into();
        Self { endpoint: endpoint.into(), api_key, agent }
    }
}

pub(crate) fn classify_http_error(err: ureq::Error) -> TransportError {
    match err {
        ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
            TransportError::retryable(format!("http status {code}"))
        }
        ureq::Error::StatusCode(code) => TransportError::fatal(format!("http status {code}")),
        other => TransportError::retryable(other.to_string()),
    }
}

impl EmbeddingTransport for HttpEmbeddingTransport {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, TransportError> {
        let mut request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(EmbedRequest { texts }).map_err(classify_http_error)?;
        let body: EmbedResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| TransportError::fatal(format!("malformed embedding response: {e}")))?;
        Ok(body.vectors)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    vector: Vec<f64>,
}

/// Text-hash keyed vector cache, optionally persisted as append-only JSON
/// lines.
pub struct EmbeddingCache {
    entries: Mutex<HashMap<String, Vec<f64>>>,
    sink: Mutex<Option<(PathBuf, File)>>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self { entries: Mutex::new(HashMap::new()), sink: Mutex::new(None) }
    }

    /// Open (or create) a cache file and load its entries. Unparseable
    /// trailing lines from an interrupted write are ignored.
    pub fn open(path: &Path) -> Result<Self, RemoteEmbeddingError> {
        let io = |source| RemoteEmbeddingError::Cache { path: path.display().to_string(), source };
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path).map_err(io)?).lines() {
                let line = line.map_err(io)?;
                if let Ok(entry) = serde_json::from_str::<CacheLine>(&line) {
                    entries.insert(entry.key, entry.vector);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        Ok(Self { entries: Mutex::new(entries), sink: Mutex::new(Some((path.to_path_buf(), file))) })
    }

    pub fn key(text: &str) -> String {
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn get(&self, key: &str) -> Option<Vec<f64>> {
        self.entries.lock().expect("cache poisoned").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, key: String, vector: Vec<f64>) -> Result<(), RemoteEmbeddingError> {
        let mut sink = self.sink.lock().expect("cache sink poisoned");
        if let Some((path, file)) = sink.as_mut() {
            let line = serde_json::to_string(&CacheLine { key: key.clone(), vector: vector.clone() })
                .expect("cache line serializes");
            writeln!(file, "{line}").map_err(|source| RemoteEmbeddingError::Cache {
                path: path.display().to_string(),
                source,
            })?;
        }
        self.entries.lock().expect("cache poisoned").insert(key, vector);
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingServiceConfig {
    pub batch_size: usize,
    pub parallelism: usize,
    pub retry: RetryPolicy,
}

impl Default for EmbeddingServiceConfig {
    fn default() -> Self {
        Self { batch_size: 64, parallelism: 4, retry: RetryPolicy::default() }
    }
}

pub struct EmbeddingService<T> {
    transport: T,
    cache: EmbeddingCache,
    config: EmbeddingServiceConfig,
}

impl<T: EmbeddingTransport> EmbeddingService<T> {
    pub fn new(transport: T, cache: EmbeddingCache, config: EmbeddingServiceConfig) -> Self {
        Self { transport, cache, config }
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    /// One vector per input text, in input order. Texts already cached are
    /// never sent; duplicate texts are sent once.
    pub fn fetch(&self, texts: &[String]) -> Result<EmbeddingMatrix, RemoteEmbeddingError> {
        let batch_size = self.config.batch_size;
        if batch_size == 0 || batch_size > MAX_BATCH_SIZE {
            return Err(RemoteEmbeddingError::BatchSize(batch_size));
        }
        let keys: Vec<String> = texts.iter().map(|t| EmbeddingCache::key(t)).collect();
        let mut queued = HashSet::new();
        let missing: Vec<(String, String)> = texts
            .iter()
            .zip(&keys)
            .filter(|(_, key)| self.cache.get(key).is_none() && queued.insert((*key).clone()))
            .map(|(text, key)| (key.clone(), text.clone()))
            .collect();
        let batches: Vec<&[(String, String)]> = missing.chunks(batch_size).collect();
        let results = exec::bounded_map(&batches, self.config.parallelism, |_, batch| {
            let batch_texts: Vec<String> = batch.iter().map(|(_, t)| t.clone()).collect();
            let vectors = exec::retry(&self.config.retry, || self.transport.embed(&batch_texts))
                .map_err(|(source, attempts)| RemoteEmbeddingError::Transport { attempts, source })?;
            if vectors.len() != batch.len() {
                return Err(RemoteEmbeddingError::PartialBatch { expected: batch.len(), found: vectors.len() });
            }
            for ((key, _), vector) in batch.iter().zip(vectors) {
                self.cache.insert(key.clone(), vector)?;
            }
            Ok(())
        });
        results.into_iter().collect::<Result<Vec<()>, _>>()?;
        let rows = keys
            .iter()
            .map(|key| self.cache.get(key).expect("every key fetched or cached"))
            .collect();
        Ok(EmbeddingMatrix::from_rows(rows)?.with_fingerprint(super::fingerprint_texts(
            texts.iter().map(String::as_str),
        )))
    }
}

/// Fetch embeddings for `texts` from an HTTP embedding service, caching
/// results at `cache_path` when given.
pub fn fetch_embeddings(
    endpoint: &str,
    texts: &[String],
    config: EmbeddingServiceConfig,
    cache_path: Option<&Path>,
    api_key: Option<String>,
) -> Result<EmbeddingMatrix, RemoteEmbeddingError> {
    let cache = match cache_path {
        Some(path) => EmbeddingCache::open(path)?,
        None => EmbeddingCache::in_memory(),
    };
    EmbeddingService::new(HttpEmbeddingTransport::new(endpoint, api_key), cache, config).fetch(texts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct CountingTransport {
        calls: AtomicUsize,
        fail_first: usize,
        drop_last: bool,
    }

    impl CountingTransport {
        fn new() -> Self {
            Self { calls: AtomicUsize::new(0), fail_first: 0, drop_last: false }
        }
    }

    impl EmbeddingTransport for CountingTransport {
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, TransportError> {
            let call = self.calls.fetch_add(1, Ordering::SeqCst);
            if call < self.fail_first {
                return Err(TransportError::retryable("connection refused"));
            }
            let mut out: Vec<Vec<f64>> =
                texts.iter().map(|t| vec![t.len() as f64, t.bytes().map(f64::from).sum()]).collect();
            if self.drop_last {
                out.pop();
            }
            Ok(out)
        }
    }

    fn texts(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn config(retries: u32) -> EmbeddingServiceConfig {
        EmbeddingServiceConfig { batch_size: 2, parallelism: 2, retry: RetryPolicy::no_delay(retries) }
    }

    #[test]
    fn second_request_is_served_from_cache() {
        let service = EmbeddingService::new(CountingTransport::new(), EmbeddingCache::in_memory(), config(0));
        let input = texts(&["a", "bb", "ccc"]);
        let first = service.fetch(&input).unwrap();
        let calls = service.transport.calls.load(Ordering::SeqCst);
        assert_eq!(calls, 2);
        let second = service.fetch(&input).unwrap();
        assert_eq!(service.transport.calls.load(Ordering::SeqCst), calls);
        assert_eq!(first, second);
    }

    #[test]
    fn order_is_preserved() {
        let service = EmbeddingService::new(CountingTransport::new(), EmbeddingCache::in_memory(), config(0));
        let m = service.fetch(&texts(&["zz", "a"])).unwrap();
        assert_eq!(m.n_rows(), 2);
        assert_eq!(m.row(0)[0], 2.0);
        assert_eq!(m.row(1)[0], 1.0);
    }

    #[test]
    fn transient_failures_are_retried() {
        let transport = CountingTransport { fail_first: 2, ..CountingTransport::new() };
        let service = EmbeddingService::new(
            transport,
            EmbeddingCache::in_memory(),
            EmbeddingServiceConfig { parallelism: 1, ..config(3) },
        );
        assert!(service.fetch(&texts(&["a"])).is_ok());
    }

    #[test]
    fn persistent_failure_errors_after_max_retries() {
        let transport = CountingTransport { fail_first: usize::MAX, ..CountingTransport::new() };
        let service = EmbeddingService::new(transport, EmbeddingCache::in_memory(), config(2));
        match service.fetch(&texts(&["a"])) {
            Err(RemoteEmbeddingError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn partial_batches_are_errors() {
        let transport = CountingTransport { drop_last: true, ..CountingTransport::new() };
        let service = EmbeddingService::new(transport, EmbeddingCache::in_memory(), config(0));
        assert!(matches!(
            service.fetch(&texts(&["a", "b"])),
            Err(RemoteEmbeddingError::PartialBatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn cache_persists_across_instances() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        let input = texts(&["hello", "world"]);
        {
            let service =
                EmbeddingService::new(CountingTransport::new(), EmbeddingCache::open(&path).unwrap(), config(0));
            service.fetch(&input).unwrap();
        }
        let service = EmbeddingService::new(CountingTransport::new(), EmbeddingCache::open(&path).unwrap(), config(0));
        service.fetch(&input).unwrap();
        assert_eq!(service.transport.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let cfg = EmbeddingServiceConfig { batch_size: MAX_BATCH_SIZE + 1, ..config(0) };
        let service = EmbeddingService::new(CountingTransport::new(), EmbeddingCache::in_memory(), cfg);
        assert!(matches!(service.fetch(&texts(&["a"])), Err(RemoteEmbeddingError::BatchSize(_))));
    }
}
