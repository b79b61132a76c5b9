use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PromptTemplate, Provider};
use crate::data::Utterance;
use crate::exec::TransportError;
use crate::seed;

/// Everything a backend may look at when judging one pair. `first` and
/// `second` carry ground-truth labels; only simulated backends read them.
pub struct OracleQuery<'a> {
    pub prompt: &'a str,
    pub template: &'a PromptTemplate,
    pub first: &'a Utterance,
    pub second: &'a Utterance,
}

/// Produces a raw textual answer for one prompt.
pub trait OracleBackend: Sync {
    fn provider(&self) -> Provider;
    fn model_name(&self) -> &str;
    fn respond(&self, query: &OracleQuery<'_>) -> Result<String, TransportError>;
}

/// Whether the simulated oracle flips its answer for the unordered pair
/// `(a, b)`: one Bernoulli(`noise_rate`) draw from a generator seeded by the
/// oracle seed and the pair.
pub fn simulated_flip(seed: u64, a: usize, b: usize, noise_rate: f64) -> bool {
    if noise_rate <= 0.0 {
        return false;
    }
    let (lo, hi) = (a.min(b) as u64, a.max(b) as u64);
    seed::rng(seed::mix(seed, &[lo, hi])).random_bool(noise_rate.min(1.0))
}

/// Ground-truth oracle: answers "Yes." iff both utterances carry the same
/// label, flipped symmetrically with probability `noise_rate`.
#[derive(Debug, Clone)]
pub struct SimulatedOracle {
    pub noise_rate: f64,
    pub seed: u64,
}

impl SimulatedOracle {
    pub fn new(noise_rate: f64, seed: u64) -> Self {
        Self { noise_rate, seed }
    }
}

impl OracleBackend for SimulatedOracle {
    fn provider(&self) -> Provider {
        Provider::Simulated
    }

    fn model_name(&self) -> &str {
        "simulated"
    }

    fn respond(&self, query: &OracleQuery<'_>) -> Result<String, TransportError> {
        let (Some(a), Some(b)) = (&query.first.label, &query.second.label) else {
            return Err(TransportError::fatal("simulated oracle needs ground-truth labels for both utterances"));
        };
        let same = a == b;
        let answer = same ^ simulated_flip(self.seed, query.first.id, query.second.id, self.noise_rate);
        Ok(if answer { "Yes." } else { "No." }.to_string())
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    #[serde(default)]
    content: Option<String>,
}

/// Chat-completion endpoint speaking the common JSON wire format:
/// `{"model", "messages":[{"role":"user","content":...}], "temperature"}` in,
/// `{"choices":[{"message":{"content":...}}]}` out.
pub struct HttpChatBackend {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs(120)))
            .build()
            .into();
        Self { endpoint: endpoint.into(), model: model.into(), api_key, agent }
    }
}

impl OracleBackend for HttpChatBackend {
    fn provider(&self) -> Provider {
        Provider::Llm
    }

    fn model_name(&self) -> &str {
        &self.model
    }

    fn respond(&self, query: &OracleQuery<'_>) -> Result<String, TransportError> {
        let body = ChatRequest {
            model: &self.model,
            messages: [ChatMessage { role: "user", content: query.prompt }],
            temperature: 0.0,
        };
        let mut request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(body).map_err(crate::data::classify_http_error)?;
        let parsed: ChatResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| TransportError::fatal(format!("malformed chat response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| TransportError::retryable("chat response has no choices"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(id: usize, label: &str) -> Utterance {
        Utterance { id, text: format!("u{id}"), label: Some(label.into()) }
    }

    fn ask(oracle: &SimulatedOracle, a: &Utterance, b: &Utterance) -> String {
        let template = PromptTemplate::default();
        oracle.respond(&OracleQuery { prompt: "", template: &template, first: a, second: b }).unwrap()
    }

    #[test]
    fn noiseless_oracle_is_ground_truth() {
        let oracle = SimulatedOracle::new(0.0, 1);
        assert_eq!(ask(&oracle, &utt(0, "a"), &utt(1, "a")), "Yes.");
        assert_eq!(ask(&oracle, &utt(0, "a"), &utt(1, "b")), "No.");
    }

    #[test]
    fn flips_are_symmetric_in_the_pair() {
        for a in 0..30 {
            for b in 0..30 {
                assert_eq!(simulated_flip(9, a, b, 0.4), simulated_flip(9, b, a, 0.4));
            }
        }
        assert!(simulated_flip(9, 1, 2, 1.0));
    }

    #[test]
    fn missing_labels_are_fatal() {
        let oracle = SimulatedOracle::new(0.0, 1);
        let template = PromptTemplate::default();
        let bare = Utterance { id: 0, text: "x".into(), label: None };
        let err = oracle
            .respond(&OracleQuery { prompt: "", template: &template, first: &bare, second: &utt(1, "a") })
            .unwrap_err();
        assert!(!err.retryable);
    }
}
