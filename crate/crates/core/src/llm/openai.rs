use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{estimate_tokens, BackendError, ChatBackend, ChatMessage, ChatRequest, Completion};

pub const ENV_API_BASE: &str = "REPAL_API_BASE";
pub const ENV_API_KEY: &str = "REPAL_API_KEY";
pub const ENV_MODEL: &str = "REPAL_MODEL";

/// Live backend speaking the OpenAI-compatible `/chat/completions` schema.
pub struct OpenAiCompatBackend {
    base_url: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    presence_penalty: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct WireErrorBody {
    error: WireError,
}

#[derive(Deserialize)]
struct WireError {
    #[serde(default)]
    message: String,
    #[serde(default)]
    code: Option<String>,
}

/// Pulls "maximum context length is N" and "resulted in M tokens" out of an error message.
fn context_numbers(message: &str) -> (Option<u64>, Option<u64>) {
    let number_after = |needle: &str| {
        message.find(needle).and_then(|i| {
            message[i + needle.len()..]
                .split(|c: char| !c.is_ascii_digit())
                .find(|s| !s.is_empty())
                .and_then(|s| s.parse().ok())
        })
    };
    (number_after("maximum context length is"), number_after("resulted in"))
}

impl OpenAiCompatBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>) -> Result<Self, BackendError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(OpenAiCompatBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            http,
        })
    }

    /// Reads `REPAL_API_BASE` (default `https://api.openai.com/v1`) and `REPAL_API_KEY`.
    pub fn from_env() -> Result<Self, BackendError> {
        let base = std::env::var(ENV_API_BASE).unwrap_or_else(|_| "https://api.openai.com/v1".into());
        Self::new(base, std::env::var(ENV_API_KEY).ok())
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url)
    }
}

impl ChatBackend for OpenAiCompatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let body = WireRequest {
            model: &request.params.model,
            messages: &request.messages,
            temperature: request.params.temperature,
            max_tokens: request.params.max_tokens,
            presence_penalty: request.params.presence_penalty,
        };
        let mut req = self.http.post(self.endpoint()).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            if let Ok(err) = serde_json::from_str::<WireErrorBody>(&text) {
                let is_ctx = err.error.code.as_deref() == Some("context_length_exceeded")
                    || err.error.message.contains("maximum context length");
                if is_ctx {
                    let (limit, used) = context_numbers(&err.error.message);
                    let estimated = request.messages.iter().map(|m| estimate_tokens(&m.content)).sum();
                    return Err(BackendError::ContextLength {
                        prompt_tokens: used.unwrap_or(estimated),
                        limit: limit.unwrap_or(0),
                    });
                }
            }
            return Err(BackendError::Status { status, body: text });
        }
        let parsed: WireResponse = serde_json::from_str(&text)
            .map_err(|e| BackendError::Transport(format!("unparseable response: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        let (prompt_tokens, completion_tokens) = match parsed.usage {
            Some(u) => (u.prompt_tokens, u.completion_tokens),
            None => (
                request.messages.iter().map(|m| estimate_tokens(&m.content)).sum(),
                estimate_tokens(&content),
            ),
        };
        Ok(Completion {
            text: content,
            prompt_tokens,
            completion_tokens,
        })
    }
}
