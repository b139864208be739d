use std::time::Duration;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use super::chat::{ChatReply, ChatRequest};
use crate::error::{Error, Result};

pub const DEFAULT_REFUSAL_PATTERNS: [&str; 3] = [
    r"cannot provide",
    r"consult a\b.*\bprofessional",
    r"I'm sorry, I can't",
];

/// A chat endpoint speaking the `/v1/chat` protocol. The bearer token is read
/// from the environment at call time and never stored.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RemoteEndpoint {
    /// Full URL of the chat route.
    pub url: String,
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
    #[serde(default = "default_patterns")]
    pub refusal_patterns: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_attempts() -> usize {
    3
}

fn default_patterns() -> Vec<String> {
    DEFAULT_REFUSAL_PATTERNS.iter().map(|s| s.to_string()).collect()
}

fn default_timeout() -> u64 {
    120
}

impl RemoteEndpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            token_env: None,
            max_attempts: default_attempts(),
            refusal_patterns: default_patterns(),
            timeout_secs: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_attempts == 0 {
            return Err(Error::Config("remote endpoint needs max_attempts >= 1".into()));
        }
        self.refusal_matchers().map(|_| ())
    }

    fn refusal_matchers(&self) -> Result<Vec<Regex>> {
        self.refusal_patterns
            .iter()
            .map(|p| {
                RegexBuilder::new(p)
                    .case_insensitive(true)
                    .build()
                    .map_err(|e| Error::Config(format!("bad refusal pattern {p:?}: {e}")))
            })
            .collect()
    }
}

/// What happened on one submission.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "text", rename_all = "snake_case")]
pub enum Attempt {
    Answer(String),
    Refusal(String),
    Transport(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteOutcome {
    /// The accepted answer, or `None` if every attempt failed.
    pub answer: Option<String>,
    pub transcripts: Vec<Attempt>,
}

impl RemoteOutcome {
    pub fn attempts(&self) -> usize {
        self.transcripts.len()
    }

    pub fn unsuccessful(&self) -> bool {
        self.answer.is_none()
    }
}

/// Sends one request and returns the reply text.
pub trait Transport {
    fn send(&self, request: &ChatRequest) -> std::result::Result<String, String>;
}

/// HTTP transport over the endpoint's URL.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(endpoint: &RemoteEndpoint) -> Result<Self> {
        let token = match &endpoint.token_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| Error::Remote(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(endpoint.timeout_secs)))
            .build()
            .into();
        Ok(Self {
            agent,
            url: endpoint.url.clone(),
            token,
        })
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> std::result::Result<String, String> {
        let mut req = self.agent.post(&self.url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send_json(request).map_err(|e| e.to_string())?;
        let reply: ChatReply = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        Ok(reply.text)
    }
}

/// Submits `request` up to `max_attempts` times, resubmitting it unchanged
/// after a refusal or transport failure, and keeps every transcript.
pub fn query_with_retry_via(
    endpoint: &RemoteEndpoint,
    transport: &dyn Transport,
    request: &ChatRequest,
) -> Result<RemoteOutcome> {
    endpoint.validate()?;
    let refusals = endpoint.refusal_matchers()?;
    let mut transcripts = Vec::new();
    for _ in 0..endpoint.max_attempts {
        match transport.send(request) {
            Ok(text) if refusals.iter().any(|r| r.is_match(&text)) => transcripts.push(Attempt::Refusal(text)),
            Ok(text) => {
                transcripts.push(Attempt::Answer(text.clone()));
                return Ok(RemoteOutcome {
                    answer: Some(text),
                    transcripts,
                });
            }
            Err(e) => {
                log::warn!("remote attempt {} failed: {e}", transcripts.len() + 1);
                transcripts.push(Attempt::Transport(e));
            }
        }
    }
    Ok(RemoteOutcome {
        answer: None,
        transcripts,
    })
}

/// [`query_with_retry_via`] over HTTP.
pub fn query_with_retry(endpoint: &RemoteEndpoint, request: &ChatRequest) -> Result<RemoteOutcome> {
    let transport = HttpTransport::new(endpoint)?;
    query_with_retry_via(endpoint, &transport, request)
}
