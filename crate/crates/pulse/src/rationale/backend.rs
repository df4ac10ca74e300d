//! Text-generation backends: a deterministic mock for offline runs and an
//! HTTP client for a real model server.

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::synth::TRAIT_WORDS;
use crate::error::{PulseError, Result};
use crate::hashing::{derive_seed, fnv1a64};

use super::REFINE_MARKER;

pub const MAX_GEN_TOKENS: usize = 512;
const HTTP_TIMEOUT: Duration = Duration::from_secs(30);
const HTTP_RETRIES: usize = 3;
const BACKOFF_MS: [u64; HTTP_RETRIES] = [500, 1000, 2000];

#[derive(Debug, Clone, Serialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerationRequest {
    fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(PulseError::InvalidArgument("empty prompt".into()));
        }
        if self.max_tokens == 0 || self.max_tokens > MAX_GEN_TOKENS {
            return Err(PulseError::InvalidArgument(format!(
                "max_tokens {} outside [1, {MAX_GEN_TOKENS}]",
                self.max_tokens
            )));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(PulseError::InvalidArgument(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    #[serde(default)]
    pub logprob: Option<f64>,
}

pub trait GenerationBackend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse>;

    /// Log-likelihood of an existing text under the backend's model, for
    /// likelihood-based selection. Only backends that can score text
    /// override this.
    fn score_text(&self, _text: &str) -> Result<f64> {
        Err(PulseError::UnsupportedByBackend(
            "text log-likelihood scoring".into(),
        ))
    }
}

/// Issue requests through the backend with at most `in_flight` outstanding
/// at once. Responses come back in request order, so results never depend
/// on completion order; the first error aborts the batch.
pub fn run_requests(
    backend: &dyn GenerationBackend,
    requests: Vec<GenerationRequest>,
    in_flight: usize,
) -> Result<Vec<GenerationResponse>> {
    let cap = in_flight.max(1);
    let mut out = Vec::with_capacity(requests.len());
    if cap == 1 {
        for req in &requests {
            out.push(backend.generate(req)?);
        }
        return Ok(out);
    }
    for chunk in requests.chunks(cap) {
        let results = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|req| scope.spawn(move || backend.generate(req)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("generation thread panicked"))
                .collect::<Vec<_>>()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Offline stand-in for a language model.
///
/// In synthetic mode it reads the prompt for planted trait words, finds the
/// modal one (ties to the lexicographically smallest), and writes a sentence
/// naming it, so downstream alignment has a recoverable signal. With the
/// drift probabilities it sometimes names a different trait instead, which
/// is what gives tree search something to rank: refinements drift more than
/// base reasons. Everything is a pure function of (prompt, seed).
#[derive(Debug, Clone)]
pub struct MockBackend {
    pub seed: u64,
    pub drift_base: f64,
    pub drift_refine: f64,
}

impl MockBackend {
    pub fn synthetic(seed: u64) -> Self {
        MockBackend {
            seed,
            drift_base: 0.25,
            drift_refine: 0.5,
        }
    }

    pub fn faithful(seed: u64) -> Self {
        MockBackend {
            seed,
            drift_base: 0.0,
            drift_refine: 0.0,
        }
    }

    fn modal_trait(prompt: &str) -> Option<&'static str> {
        let lower = prompt.to_lowercase();
        let mut best: Option<(&'static str, usize)> = None;
        for word in TRAIT_WORDS {
            let count = lower
                .split(|c: char| !c.is_alphanumeric())
                .filter(|tok| *tok == word)
                .count();
            if count == 0 {
                continue;
            }
            // Strict > keeps the earlier (lexicographically smaller) word
            // on ties; TRAIT_WORDS is sorted.
            if best.map_or(true, |(_, c)| count > c) {
                best = Some((word, count));
            }
        }
        best.map(|(w, _)| w)
    }

    fn fallback_words(prompt: &str, rng: &mut ChaCha8Rng) -> Vec<String> {
        let lower = prompt.to_lowercase();
        let mut words: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| t.len() >= 5 && t.chars().all(|c| c.is_alphabetic()))
            .collect();
        words.sort_unstable();
        words.dedup();
        if words.is_empty() {
            return vec!["variety".to_string()];
        }
        (0..2.min(words.len()))
            .map(|_| words[rng.gen_range(0..words.len())].to_string())
            .collect()
    }

    fn surrogate_logprob(text: &str) -> f64 {
        let tokens = text.split_whitespace().count().max(1);
        let frac = (fnv1a64(text.as_bytes()) % 4096) as f64 / 4096.0;
        -(0.5 + frac) * tokens as f64
    }
}

const SENTENCE_FORMS: [(&str, &str); 3] = [
    ("The user consistently picks ", " items, so the next choice should also feature "),
    ("A clear preference for ", " runs through this history; recommend something "),
    ("They gravitate toward ", " above all else, and will stay with "),
];

impl GenerationBackend for MockBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse> {
        request.validate()?;
        let node_seed = request.seed.unwrap_or(self.seed);
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(node_seed, &request.prompt));

        let text = match Self::modal_trait(&request.prompt) {
            Some(modal) => {
                let drift_p = if request.prompt.contains(REFINE_MARKER) {
                    self.drift_refine
                } else {
                    self.drift_base
                };
                let word = if rng.gen::<f64>() < drift_p {
                    let others: Vec<&str> =
                        TRAIT_WORDS.iter().copied().filter(|w| *w != modal).collect();
                    others[rng.gen_range(0..others.len())]
                } else {
                    modal
                };
                let (lead, bridge) = SENTENCE_FORMS[rng.gen_range(0..SENTENCE_FORMS.len())];
                format!("{lead}{word}{bridge}{word}.")
            }
            None => {
                let words = Self::fallback_words(&request.prompt, &mut rng);
                format!(
                    "The history suggests a steady interest in {}.",
                    words.join(" and ")
                )
            }
        };
        let logprob = Self::surrogate_logprob(&text);
        Ok(GenerationResponse {
            text,
            logprob: Some(logprob),
        })
    }

    fn score_text(&self, text: &str) -> Result<f64> {
        if text.is_empty() {
            return Err(PulseError::InvalidArgument("cannot score empty text".into()));
        }
        Ok(Self::surrogate_logprob(text))
    }
}

/// Client for a generation server speaking POST {base_url}/generate with a
/// JSON body. Transient failures (transport errors, 5xx) are retried three
/// times with 0.5s/1s/2s backoff; anything else is a protocol error.
pub struct HttpBackend {
    base_url: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(HTTP_TIMEOUT)
            .build()
            .map_err(|e| PulseError::BackendProtocolError(format!("client setup: {e}")))?;
        Ok(HttpBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client,
        })
    }

    fn attempt(&self, request: &GenerationRequest) -> std::result::Result<GenerationResponse, AttemptError> {
        let url = format!("{}/generate", self.base_url);
        let resp = self
            .client
            .post(&url)
            .json(request)
            .send()
            .map_err(|e| AttemptError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(AttemptError::Transient(format!("server status {status}")));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(format!("unexpected status {status}")));
        }
        let body: GenerationResponse = resp
            .json()
            .map_err(|e| AttemptError::Fatal(format!("bad response body: {e}")))?;
        if body.text.is_empty() {
            return Err(AttemptError::Fatal("empty generation text".into()));
        }
        Ok(body)
    }
}

enum AttemptError {
    Transient(String),
    Fatal(String),
}

impl GenerationBackend for HttpBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse> {
        request.validate()?;
        let mut last = String::new();
        for attempt in 0..=HTTP_RETRIES {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(BACKOFF_MS[attempt - 1]));
            }
            match self.attempt(request) {
                Ok(resp) => return Ok(resp),
                Err(AttemptError::Fatal(detail)) => {
                    return Err(PulseError::BackendProtocolError(detail))
                }
                Err(AttemptError::Transient(detail)) => last = detail,
            }
        }
        Err(PulseError::BackendUnavailable {
            attempts: HTTP_RETRIES + 1,
            detail: last,
        })
    }
}
