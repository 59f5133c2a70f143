//! Profile providers: a deterministic offline mock and a generic HTTP
//! endpoint.

use std::collections::HashSet;
use std::time::Duration;

use rand::seq::SliceRandom;
use serde::Deserialize;

use super::{ProfileError, PromptText};
use crate::seeds;

/// The two-part text a provider returns for one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct ProfileResponse {
    pub summarisation: String,
    pub reasoning: String,
}

/// Turns one prompt into a profile. Implementations must be safe to
/// call concurrently across nodes.
pub trait ProfileProvider: Sync {
    fn generate(&self, prompt: &PromptText) -> Result<ProfileResponse, ProfileError>;
}

/// Offline provider producing extractive pseudo-profiles.
///
/// The output is a pure function of the prompt body and the seed: a
/// sample of the body's own vocabulary, split into the two response
/// parts, well under the 200-word budget. No I/O of any kind.
#[derive(Debug, Clone, Copy)]
pub struct MockProvider {
    pub seed: u64,
}

impl MockProvider {
    pub fn new(seed: u64) -> Self {
        MockProvider { seed }
    }
}

const MOCK_WORDS_PER_PART: usize = 24;

impl ProfileProvider for MockProvider {
    fn generate(&self, prompt: &PromptText) -> Result<ProfileResponse, ProfileError> {
        let mut seen = HashSet::new();
        let words: Vec<&str> = prompt
            .body
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
            .filter(|w| w.len() >= 3 && seen.insert(*w))
            .collect();
        let words = if words.is_empty() { vec!["profile"] } else { words };

        let mut rng = seeds::rng(self.seed, &prompt.body);
        let pick = |rng: &mut _| -> Vec<&str> {
            words.choose_multiple(rng, MOCK_WORDS_PER_PART).copied().collect()
        };
        let summary_terms = pick(&mut rng).join(", ");
        let reasoning_terms = pick(&mut rng).join(", ");
        Ok(ProfileResponse {
            summarisation: format!("Likely audience keywords: {summary_terms}."),
            reasoning: format!("These keywords recur in the provided information: {reasoning_terms}."),
        })
    }
}

/// Connection settings for [`HttpProvider`], usually read from the
/// environment.
#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub url: String,
    pub token: Option<String>,
    pub timeout: Duration,
    /// Total attempts before giving up on one prompt.
    pub retries: u32,
}

pub const ENV_URL: &str = "CLLMR_LLM_URL";
pub const ENV_TOKEN: &str = "CLLMR_LLM_TOKEN";
pub const ENV_TIMEOUT: &str = "CLLMR_LLM_TIMEOUT_S";

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
const DEFAULT_RETRIES: u32 = 3;

impl HttpConfig {
    /// Reads `CLLMR_LLM_URL` (required), `CLLMR_LLM_TOKEN` (optional),
    /// and `CLLMR_LLM_TIMEOUT_S` (optional, seconds, default 30).
    pub fn from_env() -> Result<Self, ProfileError> {
        let url = std::env::var(ENV_URL).map_err(|_| ProfileError::MissingEnv { var: ENV_URL })?;
        let token = std::env::var(ENV_TOKEN).ok();
        let timeout = match std::env::var(ENV_TIMEOUT) {
            Err(_) => DEFAULT_TIMEOUT,
            Ok(raw) => {
                let secs: f64 = raw
                    .parse()
                    .ok()
                    .filter(|s| *s > 0.0)
                    .ok_or(ProfileError::BadEnv { var: ENV_TIMEOUT, value: raw })?;
                Duration::from_secs_f64(secs)
            }
        };
        Ok(HttpConfig { url, token, timeout, retries: DEFAULT_RETRIES })
    }
}

/// Provider forwarding prompts to an external endpoint.
///
/// Sends `{"dataset", "kind", "prompt"}` as a JSON POST and expects a
/// 2xx JSON reply with `summarisation` and `reasoning` fields.
/// Timeouts and non-2xx statuses are retried; a malformed 2xx body is
/// not.
pub struct HttpProvider {
    agent: ureq::Agent,
    config: HttpConfig,
}

impl HttpProvider {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        HttpProvider { agent, config }
    }

    pub fn from_env() -> Result<Self, ProfileError> {
        Ok(HttpProvider::new(HttpConfig::from_env()?))
    }

    fn attempt(&self, prompt: &PromptText) -> Result<ProfileResponse, RequestFailure> {
        let mut request = self.agent.post(&self.config.url);
        if let Some(token) = &self.config.token {
            request = request.set("Authorization", &format!("Bearer {token}"));
        }
        let payload = serde_json::json!({
            "dataset": prompt.dataset.name(),
            "kind": prompt.kind,
            "prompt": prompt.body,
        });
        let response = request.send_json(payload).map_err(|e| match e {
            ureq::Error::Status(code, _) => RequestFailure::Retry(format!("status {code}")),
            ureq::Error::Transport(t) => RequestFailure::Retry(t.to_string()),
        })?;
        response.into_json().map_err(|e| {
            RequestFailure::Fatal(ProfileError::Format { message: e.to_string() })
        })
    }
}

enum RequestFailure {
    Retry(String),
    Fatal(ProfileError),
}

impl ProfileProvider for HttpProvider {
    fn generate(&self, prompt: &PromptText) -> Result<ProfileResponse, ProfileError> {
        let mut last = String::new();
        for _ in 0..self.config.retries.max(1) {
            match self.attempt(prompt) {
                Ok(response) => return Ok(response),
                Err(RequestFailure::Retry(message)) => last = message,
                Err(RequestFailure::Fatal(error)) => return Err(error),
            }
        }
        Err(ProfileError::Provider { attempts: self.config.retries.max(1), message: last })
    }
}
