use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{build_prompt, parse_response, CachedLabel, HttpChatBackend, LabelCache, OracleBackend, OracleQuery, PromptError, PromptTemplate, SimulatedOracle};
use crate::data::{DatasetBundle, Mode};
use crate::exec::{bounded_map, retry, RetryPolicy};
use crate::sampler::CandidatePair;
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("no pairs to annotate")]
    EmptyPairs,
    #[error("pair references unknown training id {0}")]
    UnknownId(usize),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("label cache: {0}")]
    Cache(#[from] std::io::Error),
    #[error("schema selection requires labels")]
    RequiresLabels,
    #[error("schema selection needs at least one candidate template")]
    NoCandidates,
    #[error("labelled subset has too few utterances to draw evaluation pairs")]
    TooFewLabeled,
    #[error("llm provider needs an endpoint")]
    MissingEndpoint,
}

/// Where a relation label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    Llm,
    Simulated,
    LabeledShortcut,
}

/// The backend answering pairs that are not shortcut from known labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Llm,
    #[default]
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub provider: ProviderKind,
    /// Label pairs of two labelled utterances from ground truth instead of
    /// asking the backend (semi-supervised runs only).
    pub labeled_shortcut: bool,
    pub endpoint: Option<String>,
    pub model_name: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub noise_rate: f64,
    pub max_retries: u32,
    pub retry_base_delay_ms: u64,
    pub request_parallelism: usize,
    pub seed: u64,
    pub max_prompt_chars: usize,
    pub cache_path: Option<PathBuf>,
    /// Evaluation pairs drawn from the labelled subset for schema selection.
    pub selection_pairs: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Simulated,
            labeled_shortcut: true,
            endpoint: None,
            model_name: "gpt-3.5-turbo".into(),
            api_key_env: "LANID_API_KEY".into(),
            noise_rate: 0.0,
            max_retries: 3,
            retry_base_delay_ms: 500,
            request_parallelism: 8,
            seed: 0,
            max_prompt_chars: 4000,
            cache_path: None,
            selection_pairs: 200,
        }
    }
}

impl OracleConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.noise_rate) {
            out.push(format!("oracle.noise_rate: must be in [0, 1], got {}", self.noise_rate));
        }
        if self.request_parallelism == 0 {
            out.push("oracle.request_parallelism: must be >= 1".into());
        }
        if self.max_prompt_chars == 0 {
            out.push("oracle.max_prompt_chars: must be >= 1".into());
        }
        if self.provider == ProviderKind::Llm && self.endpoint.as_deref().is_none_or(str::is_empty) {
            out.push("oracle.endpoint: required for the llm provider".into());
        }
        if self.model_name.is_empty() {
            out.push("oracle.model_name: must not be empty".into());
        }
        out
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base_delay_ms: self.retry_base_delay_ms,
            max_delay_ms: self.retry_base_delay_ms.saturating_mul(16),
        }
    }

    /// Instantiate the configured backend. The API key is read from the
    /// environment here and nowhere else.
    pub fn backend(&self) -> Result<Box<dyn OracleBackend>, OracleError> {
        match self.provider {
            ProviderKind::Simulated => Ok(Box::new(SimulatedOracle::new(self.noise_rate, self.seed))),
            ProviderKind::Llm => {
                let endpoint = self.endpoint.clone().filter(|e| !e.is_empty()).ok_or(OracleError::MissingEndpoint)?;
                let key = std::env::var(&self.api_key_env).ok();
                Ok(Box::new(HttpChatBackend::new(endpoint, self.model_name.clone(), key)))
            }
        }
    }
}

/// r(i, j) for one candidate pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationLabel {
    pub pair: CandidatePair,
    pub r: u8,
    pub raw_response: String,
    pub provider: Provider,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedPair {
    pub pair: CandidatePair,
    pub error: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationOutcome {
    /// Successful labels in input order.
    pub labels: Vec<RelationLabel>,
    pub failed: Vec<FailedPair>,
    /// Backend calls issued (first attempts only, retries not counted).
    pub dispatched: usize,
    pub cache_hits: usize,
    pub shortcut: usize,
}

enum Slot {
    Ready(u8, String, Provider),
    Pending(usize),
}

/// Label `pairs` (training ids) with the backend, consulting known labels and
/// the cache first. Identical unordered pairs within the batch are
/// dispatched once. Pairs whose dispatch fails after the retry budget are
/// reported in `failed` and left out of `labels`.
pub fn annotate_pairs(
    pairs: &[CandidatePair],
    bundle: &DatasetBundle,
    template: &PromptTemplate,
    backend: &dyn OracleBackend,
    cache: &LabelCache,
    cfg: &OracleConfig,
) -> Result<AnnotationOutcome, OracleError> {
    if pairs.is_empty() {
        return Err(OracleError::EmptyPairs);
    }
    let template_hash = template.hash();
    let shortcut_on = cfg.labeled_shortcut && bundle.mode() == Mode::SemiSupervised;
    let mut outcome = AnnotationOutcome::default();
    let mut slots = Vec::with_capacity(pairs.len());
    let mut pending: Vec<(String, CandidatePair, String)> = Vec::new();
    let mut pending_by_key: HashMap<String, usize> = HashMap::new();

    for pair in pairs {
        let a = bundle.train.get(pair.anchor_id).ok_or(OracleError::UnknownId(pair.anchor_id))?;
        let b = bundle.train.get(pair.other_id).ok_or(OracleError::UnknownId(pair.other_id))?;
        if shortcut_on {
            if let (Some(la), Some(lb)) = (bundle.visible_label(a.id), bundle.visible_label(b.id)) {
                outcome.shortcut += 1;
                slots.push(Slot::Ready(u8::from(la == lb), "labeled".into(), Provider::LabeledShortcut));
                continue;
            }
        }
        let key = LabelCache::key(backend.model_name(), &template_hash, &a.text, &b.text);
        if let Some(hit) = cache.get(&key) {
            outcome.cache_hits += 1;
            slots.push(Slot::Ready(hit.r, hit.raw_response, backend.provider()));
            continue;
        }
        let index = match pending_by_key.get(&key) {
            Some(&index) => {
                outcome.cache_hits += 1;
                index
            }
            None => {
                let prompt = build_prompt(template, a, b, cfg.max_prompt_chars)?;
                pending.push((key.clone(), *pair, prompt));
                pending_by_key.insert(key, pending.len() - 1);
                pending.len() - 1
            }
        };
        slots.push(Slot::Pending(index));
    }

    outcome.dispatched = pending.len();
    let policy = cfg.retry_policy();
    let answers = bounded_map(&pending, cfg.request_parallelism, |_, (_, pair, prompt)| {
        let query = OracleQuery {
            prompt,
            template,
            first: &bundle.train[pair.anchor_id],
            second: &bundle.train[pair.other_id],
        };
        retry(&policy, || backend.respond(&query))
    });
    // cache writes happen in input order so the cache file is reproducible
    for ((key, _, _), answer) in pending.iter().zip(&answers) {
        if let Ok(raw) = answer {
            cache.insert(CachedLabel { key: key.clone(), r: parse_response(raw), raw_response: raw.clone() })?;
        }
    }

    for (pair, slot) in pairs.iter().zip(slots) {
        let (r, raw_response, provider) = match slot {
            Slot::Ready(r, raw, provider) => (r, raw, provider),
            Slot::Pending(index) => match &answers[index] {
                Ok(raw) => (parse_response(raw), raw.clone(), backend.provider()),
                Err((err, attempts)) => {
                    outcome.failed.push(FailedPair { pair: *pair, error: err.to_string(), attempts: *attempts });
                    continue;
                }
            },
        };
        outcome.labels.push(RelationLabel { pair: *pair, r, raw_response, provider });
    }
    if !outcome.failed.is_empty() {
        tracing::warn!(failed = outcome.failed.len(), "oracle dispatch failed for some pairs; they are excluded");
    }
    Ok(outcome)
}

/// A configured backend together with the template and cache it answers
/// through; what the training loop talks to.
pub struct OracleSession<'a> {
    pub template: &'a PromptTemplate,
    pub backend: &'a dyn OracleBackend,
    pub cache: &'a LabelCache,
    pub config: &'a OracleConfig,
}

impl OracleSession<'_> {
    pub fn annotate(&self, pairs: &[CandidatePair], bundle: &DatasetBundle) -> Result<AnnotationOutcome, OracleError> {
        annotate_pairs(pairs, bundle, self.template, self.backend, self.cache, self.config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemaSelection {
    pub index: usize,
    pub template: PromptTemplate,
    /// Pairwise-label accuracy of every candidate, in candidate order.
    pub accuracies: Vec<f64>,
    pub evaluation_pairs: usize,
}

/// Draw up to `n` evaluation pairs from the labelled subset, alternating
/// same-label and different-label pairs. Returns `(a, b, same)` triples.
fn draw_selection_pairs(bundle: &DatasetBundle, n: usize, seed: u64) -> Vec<(usize, usize, bool)> {
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &id in bundle.labeled_subset() {
        if let Some(label) = bundle.visible_label(id) {
            by_label.entry(label).or_default().push(id);
        }
    }
    let groups: Vec<&Vec<usize>> = by_label.values().filter(|ids| ids.len() >= 2).collect();
    let all: Vec<usize> = bundle.labeled_subset().to_vec();
    let mut rng = seed::rng(seed::mix(seed, &[0x7363686d]));
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let want_same = i % 2 == 0;
        let drawn = if want_same {
            groups.choose(&mut rng).map(|ids| {
                let picks: Vec<&usize> = ids.choose_multiple(&mut rng, 2).collect();
                (*picks[0], *picks[1], true)
            })
        } else if by_label.len() >= 2 {
            loop {
                let a = all[rng.random_range(0..all.len())];
                let b = all[rng.random_range(0..all.len())];
                if bundle.visible_label(a) != bundle.visible_label(b) {
                    break Some((a, b, false));
                }
            }
        } else {
            None
        };
        out.extend(drawn);
    }
    out
}

/// Pick the candidate template whose answers best agree with the known
/// labels on a seeded, balanced sample of labelled pairs. Ties go to the
/// earlier candidate; failed dispatches count as wrong answers.
pub fn select_schema(
    candidates: &[PromptTemplate],
    bundle: &DatasetBundle,
    backend: &dyn OracleBackend,
    cfg: &OracleConfig,
) -> Result<SchemaSelection, OracleError> {
    if bundle.mode() != Mode::SemiSupervised {
        return Err(OracleError::RequiresLabels);
    }
    if candidates.is_empty() {
        return Err(OracleError::NoCandidates);
    }
    let pairs = draw_selection_pairs(bundle, cfg.selection_pairs, cfg.seed);
    if pairs.is_empty() {
        return Err(OracleError::TooFewLabeled);
    }
    if candidates.len() == 1 {
        return Ok(SchemaSelection { index: 0, template: candidates[0].clone(), accuracies: vec![], evaluation_pairs: pairs.len() });
    }
    let policy = cfg.retry_policy();
    let mut accuracies = Vec::with_capacity(candidates.len());
    for template in candidates {
        let prompts = pairs
            .iter()
            .map(|&(a, b, _)| build_prompt(template, &bundle.train[a], &bundle.train[b], cfg.max_prompt_chars))
            .collect::<Result<Vec<_>, _>>()?;
        let correct: Vec<bool> = bounded_map(&pairs, cfg.request_parallelism, |i, &(a, b, same)| {
            let query = OracleQuery { prompt: &prompts[i], template, first: &bundle.train[a], second: &bundle.train[b] };
            match retry(&policy, || backend.respond(&query)) {
                Ok(raw) => (parse_response(&raw) == 1) == same,
                Err(_) => false,
            }
        });
        accuracies.push(correct.iter().filter(|&&c| c).count() as f64 / pairs.len() as f64);
    }
    let mut index = 0;
    for (i, &acc) in accuracies.iter().enumerate() {
        if acc > accuracies[index] {
            index = i;
        }
    }
    Ok(SchemaSelection { index, template: candidates[index].clone(), accuracies, evaluation_pairs: pairs.len() })
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::data::Utterance;
    use crate::exec::TransportError;
    use crate::sampler::PairSource;

    fn bundle(labels: &[&str]) -> DatasetBundle {
        let train: Vec<Utterance> = labels
            .iter()
            .enumerate()
            .map(|(id, l)| Utterance { id, text: format!("text {id}"), label: Some(l.to_string()) })
            .collect();
        DatasetBundle::unsupervised(train.clone(), vec![], train)
    }

    fn pair(a: usize, b: usize) -> CandidatePair {
        CandidatePair { anchor_id: a, other_id: b, source: PairSource::Knn, iteration: 0 }
    }

    fn quick() -> OracleConfig {
        OracleConfig { max_retries: 2, retry_base_delay_ms: 0, request_parallelism: 4, ..OracleConfig::default() }
    }

    struct Counting {
        calls: AtomicUsize,
        fail_on: Option<usize>,
    }

    impl OracleBackend for Counting {
        fn provider(&self) -> Provider {
            Provider::Llm
        }
        fn model_name(&self) -> &str {
            "counting"
        }
        fn respond(&self, q: &OracleQuery<'_>) -> Result<String, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if Some(q.first.id) == self.fail_on {
                return Err(TransportError::retryable("down"));
            }
            Ok(if q.first.label == q.second.label { "yes" } else { "no" }.into())
        }
    }

    #[test]
    fn simulated_noiseless_is_truth_and_order_is_kept() {
        let b = bundle(&["a", "a", "b", "b"]);
        let pairs = [pair(0, 1), pair(1, 2), pair(3, 2), pair(0, 3)];
        let backend = SimulatedOracle::new(0.0, 3);
        let out = annotate_pairs(&pairs, &b, &PromptTemplate::default(), &backend, &LabelCache::in_memory(), &quick()).unwrap();
        assert_eq!(out.labels.iter().map(|l| l.r).collect::<Vec<_>>(), vec![1, 0, 1, 0]);
        assert_eq!(out.labels.iter().map(|l| l.pair).collect::<Vec<_>>(), pairs.to_vec());
        assert!(out.labels.iter().all(|l| l.provider == Provider::Simulated));
    }

    #[test]
    fn cache_and_batch_dedup_prevent_redispatch() {
        let b = bundle(&["a", "a", "b"]);
        let backend = Counting { calls: AtomicUsize::new(0), fail_on: None };
        let cache = LabelCache::in_memory();
        let pairs = [pair(0, 1), pair(1, 0), pair(0, 2)];
        let first = annotate_pairs(&pairs, &b, &PromptTemplate::default(), &backend, &cache, &quick()).unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);
        assert_eq!(first.dispatched, 2);
        let second = annotate_pairs(&pairs, &b, &PromptTemplate::default(), &backend, &cache, &quick()).unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);
        assert_eq!(second.cache_hits, 3);
        assert_eq!(
            first.labels.iter().map(|l| l.r).collect::<Vec<_>>(),
            second.labels.iter().map(|l| l.r).collect::<Vec<_>>()
        );
    }

    #[test]
    fn failures_are_reported_not_defaulted() {
        let b = bundle(&["a", "a", "b"]);
        let backend = Counting { calls: AtomicUsize::new(0), fail_on: Some(2) };
        let pairs = [pair(0, 1), pair(2, 0), pair(1, 2)];
        let out = annotate_pairs(&pairs, &b, &PromptTemplate::default(), &backend, &LabelCache::in_memory(), &quick()).unwrap();
        assert_eq!(out.labels.len(), 2);
        assert_eq!(out.failed.len(), 1);
        assert_eq!(out.failed[0].pair, pair(2, 0));
        assert_eq!(out.failed[0].attempts, 3);
    }

    #[test]
    fn labelled_pairs_skip_the_backend() {
        let labels: Vec<String> = (0..40).map(|i| format!("c{}", i % 4)).collect();
        let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
        let b = bundle(&refs).into_semi_supervised(0.5, 0.5, 1).unwrap();
        let known = b.labeled_subset().to_vec();
        let unknown = b.unlabeled_ids();
        let backend = Counting { calls: AtomicUsize::new(0), fail_on: None };
        let pairs = [pair(known[0], known[1]), pair(known[0], unknown[0])];
        let out = annotate_pairs(&pairs, &b, &PromptTemplate::default(), &backend, &LabelCache::in_memory(), &quick()).unwrap();
        assert_eq!(out.shortcut, 1);
        assert_eq!(out.labels[0].provider, Provider::LabeledShortcut);
        assert_eq!(out.labels[1].provider, Provider::Llm);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn empty_input_is_an_error() {
        let b = bundle(&["a", "b"]);
        let backend = SimulatedOracle::new(0.0, 0);
        assert!(matches!(
            annotate_pairs(&[], &b, &PromptTemplate::default(), &backend, &LabelCache::in_memory(), &quick()),
            Err(OracleError::EmptyPairs)
        ));
    }

    #[test]
    fn schema_selection_needs_labels() {
        let b = bundle(&["a", "b"]);
        let backend = SimulatedOracle::new(0.0, 0);
        let err = select_schema(&[PromptTemplate::default()], &b, &backend, &quick()).unwrap_err();
        assert_eq!(err.to_string(), "schema selection requires labels");
    }
}
