use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use ureq::Agent;

use crate::{AugmentError, AugmentPrompt, Backend, Result};

/// Where and how to reach a chat-completion service. The key itself is
/// never stored here, only the name of the variable holding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmEndpointConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: f64,
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub temperature: f64,
    /// First backoff delay; doubles on every retry.
    pub backoff_ms: u64,
}

impl Default for LlmEndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "AUGMENT_API_KEY".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            temperature: 0.7,
            backoff_ms: 500,
        }
    }
}

struct ApiKey(String);

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(<redacted>)")
    }
}

#[derive(Debug)]
pub struct HttpBackend {
    cfg: LlmEndpointConfig,
    key: ApiKey,
    agent: Agent,
}

impl HttpBackend {
    /// Reads the key from the configured environment variable. Fails before
    /// any connection is attempted when it is absent or empty.
    pub fn from_env(cfg: LlmEndpointConfig) -> Result<Self> {
        let key = std::env::var(&cfg.api_key_env)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| AugmentError::Config(format!("environment variable {} is not set", cfg.api_key_env)))?;
        if !(cfg.timeout_secs > 0.0) {
            return Err(AugmentError::Config("timeout must be positive".into()));
        }
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            cfg,
            key: ApiKey(key),
            agent,
        })
    }

    pub fn config(&self) -> &LlmEndpointConfig {
        &self.cfg
    }

    fn attempt(&self, body: &str) -> Result<String> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let resp = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.key.0))
            .header("Content-Type", "application/json")
            .send(body);
        let mut resp = match resp {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(AugmentError::Timeout),
            Err(ureq::Error::Io(e)) if e.kind() == std::io::ErrorKind::TimedOut => return Err(AugmentError::Timeout),
            Err(e) => return Err(AugmentError::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Err(AugmentError::Timeout),
            Err(e) => return Err(AugmentError::Transport(e.to_string())),
        };
        match status {
            200..=299 => Ok(text),
            401 | 403 => Err(AugmentError::Auth { status }),
            _ => Err(AugmentError::Status {
                status,
                body: text.chars().take(200).collect(),
            }),
        }
    }
}

fn retryable(e: &AugmentError) -> bool {
    match e {
        AugmentError::Timeout | AugmentError::Transport(_) => true,
        AugmentError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

fn request_body(cfg: &LlmEndpointConfig, system: &str, user: &str) -> String {
    json!({
        "model": cfg.model,
        "temperature": cfg.temperature,
        "messages": [
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ],
    })
    .to_string()
}

fn send_with_retries(endpoint: &HttpBackend, body: &str) -> Result<String> {
    let mut attempt = 0;
    loop {
        match endpoint.attempt(body) {
            Ok(text) => return Ok(text),
            Err(e) if retryable(&e) && attempt < endpoint.cfg.max_retries => {
                let delay = endpoint.cfg.backoff_ms.saturating_mul(1 << attempt.min(20));
                log::warn!("request failed ({e}); retrying in {delay} ms");
                std::thread::sleep(Duration::from_millis(delay));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Sends the prompt and returns the response body unchanged, retrying
/// transient failures with exponential backoff.
pub fn request_augmentations(prompt: &AugmentPrompt, endpoint: &HttpBackend) -> Result<String> {
    send_with_retries(endpoint, &request_body(&endpoint.cfg, &prompt.system_message, &prompt.user_message))
}

/// Text of the first choice of a chat-completion response.
pub fn extract_reply(body: &str) -> Result<String> {
    let v: Value = serde_json::from_str(body).map_err(|e| AugmentError::Response(format!("not JSON: {e}")))?;
    let choice = &v["choices"][0];
    choice["message"]["content"]
        .as_str()
        .or_else(|| choice["text"].as_str())
        .map(str::to_string)
        .ok_or_else(|| AugmentError::Response("no text in the first choice".into()))
}

impl Backend for HttpBackend {
    fn complete(&self, _story_id: &str, prompt: &AugmentPrompt, corrective: bool) -> Result<String> {
        let body = if corrective {
            send_with_retries(self, &request_body(&self.cfg, &prompt.system_message, &prompt.corrected_user_message()))?
        } else {
            request_augmentations(prompt, self)?
        };
        extract_reply(&body)
    }
}
