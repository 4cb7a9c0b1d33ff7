//! Clients for chat-completions-style answer APIs and embeddings-style
//! text-encoder APIs.

use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::backend::{AnswerBackend, PerceptionImage, TextEncoder};
use super::{PerceptionError, Question};

pub const API_KEY_ENV: &str = "HPFUSE_API_KEY";
pub const BASE_URL_ENV: &str = "HPFUSE_BACKEND_URL";

#[derive(Clone, Debug)]
pub struct HttpConfig {
    /// Base URL; `/chat/completions` and `/embeddings` are appended.
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    /// First retry delay; doubles on every further attempt.
    pub backoff: Duration,
    pub max_concurrency: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            api_key: None,
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff: Duration::from_millis(500),
            max_concurrency: 4,
        }
    }
}

impl HttpConfig {
    /// Fill the base URL and API key from the environment when present.
    pub fn from_env(mut self) -> Self {
        if let Ok(url) = std::env::var(BASE_URL_ENV) {
            self.base_url = url;
        }
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            self.api_key = Some(key);
        }
        self
    }
}

#[derive(Clone)]
struct Client {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl Client {
    fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(config.timeout)).build().into();
        Self { config, agent }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    /// POST a JSON body, retrying transport and status failures with
    /// exponential backoff. Malformed responses are not retried.
    fn post(&self, path: &str, body: &Value) -> Result<Value, PerceptionError> {
        let url = self.url(path);
        let payload = body.to_string();
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff * 2u32.saturating_pow(attempt - 1));
            }
            let mut req = self.agent.post(&url).header("Content-Type", "application/json");
            if let Some(key) = &self.config.api_key {
                req = req.header("Authorization", format!("Bearer {key}"));
            }
            match req.send(payload.as_str()) {
                Ok(mut resp) => {
                    let text = match resp.body_mut().read_to_string() {
                        Ok(t) => t,
                        Err(e) => {
                            last = e.to_string();
                            log::warn!("{url}: attempt {} failed: {last}", attempt + 1);
                            continue;
                        }
                    };
                    return serde_json::from_str(&text)
                        .map_err(|e| PerceptionError::Protocol(format!("{url}: response is not JSON: {e}")));
                }
                Err(e) => {
                    last = e.to_string();
                    log::warn!("{url}: attempt {} failed: {last}", attempt + 1);
                }
            }
        }
        Err(PerceptionError::Transport { url, attempts, message: last })
    }
}

/// Vision-language answers over a chat-completions-compatible API; one
/// question and one inline image per request.
#[derive(Clone)]
pub struct HttpAnswerBackend {
    client: Client,
    model: String,
}

impl HttpAnswerBackend {
    pub fn new(config: HttpConfig, model: impl Into<String>) -> Self {
        Self { client: Client::new(config), model: model.into() }
    }

    pub fn request_body(&self, image: &PerceptionImage, question: &Question) -> Value {
        let data = base64::engine::general_purpose::STANDARD.encode(image.bytes());
        json!({
            "model": self.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": question.text},
                    {"type": "image_url", "image_url": {"url": format!("data:{};base64,{data}", image.mime())}}
                ]
            }]
        })
    }
}

impl AnswerBackend for HttpAnswerBackend {
    fn id(&self) -> String {
        format!("http-vlm:{}@{}", self.model, self.client.config.base_url)
    }

    fn answer(&self, image: &PerceptionImage, question: &Question) -> Result<String, PerceptionError> {
        let resp = self.client.post("chat/completions", &self.request_body(image, question))?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| PerceptionError::Protocol("missing choices[0].message.content".into()))
    }

    fn max_concurrency(&self) -> usize {
        self.client.config.max_concurrency.max(1)
    }
}

/// Text embeddings over an embeddings-compatible API.
#[derive(Clone)]
pub struct HttpTextEncoder {
    client: Client,
    model: String,
    dim: usize,
}

impl HttpTextEncoder {
    pub fn new(config: HttpConfig, model: impl Into<String>, dim: usize) -> Self {
        Self { client: Client::new(config), model: model.into(), dim }
    }
}

impl TextEncoder for HttpTextEncoder {
    fn id(&self) -> String {
        format!("http-text:{}@{}", self.model, self.client.config.base_url)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, PerceptionError> {
        let resp = self.client.post("embeddings", &json!({"model": self.model, "input": texts}))?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| PerceptionError::Protocol("missing data array".into()))?;
        if data.len() != texts.len() {
            return Err(PerceptionError::Protocol(format!("{} embeddings for {} inputs", data.len(), texts.len())));
        }
        let mut out = vec![Vec::new(); texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
            let vector: Option<Vec<f64>> =
                item.get("embedding").and_then(Value::as_array).and_then(|a| a.iter().map(Value::as_f64).collect());
            let vector = vector.ok_or_else(|| PerceptionError::Protocol(format!("item {pos}: bad embedding")))?;
            if vector.len() != self.dim {
                return Err(PerceptionError::Dimension { expected: self.dim, got: vector.len() });
            }
            let slot =
                out.get_mut(index).ok_or_else(|| PerceptionError::Protocol(format!("index {index} out of range")))?;
            *slot = vector;
        }
        if out.iter().any(Vec::is_empty) {
            return Err(PerceptionError::Protocol("duplicate embedding index".into()));
        }
        Ok(out)
    }
}
