use std::sync::{Condvar, Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, BackendRequest, BackendResponse, Role};
use crate::math::{cosine, EmbeddingVector};

pub const API_KEY_ENV: &str = "DELIBERANT_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub chat_path: String,
    pub embeddings_path: String,
    pub model_name: String,
    /// Embedding model; falls back to `model_name`.
    pub embedding_model: Option<String>,
    /// Per-request timeout in seconds.
    pub timeout: f64,
    pub max_retries: u32,
    /// First retry delay in seconds; doubles on every further attempt.
    pub backoff_base: f64,
    pub max_connections: usize,
    pub temperature: f64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            chat_path: "/v1/chat/completions".into(),
            embeddings_path: "/v1/embeddings".into(),
            model_name: "gpt-3.5-turbo".into(),
            embedding_model: None,
            timeout: 30.0,
            max_retries: 3,
            backoff_base: 0.5,
            max_connections: 4,
            temperature: 0.7,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout > 0.0 && self.timeout.is_finite()) {
            return Err(format!("backend.endpoint.timeout must be positive, got {}", self.timeout));
        }
        if self.max_retries > 5 {
            return Err(format!("backend.endpoint.max_retries must be at most 5, got {}", self.max_retries));
        }
        if self.backoff_base < 0.0 {
            return Err("backend.endpoint.backoff_base must be non-negative".into());
        }
        if self.max_connections == 0 {
            return Err("backend.endpoint.max_connections must be at least 1".into());
        }
        Ok(())
    }

    /// Delay before retry number `attempt` (0-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_secs_f64(self.backoff_base * f64::from(1u32 << attempt.min(16)))
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }
}

/// Counting semaphore bounding in-flight connections.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

enum Failure {
    Transient(BackendError),
    Fatal(BackendError),
}

/// Client for an OpenAI-compatible chat-completions and embeddings API.
///
/// A text endpoint cannot take the modulation vector directly, so each
/// generation request is prefixed with the persona instruction whose
/// embedding is nearest to the modulation.
pub struct HttpBackend {
    config: EndpointConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    personas: Vec<String>,
    persona_embeddings: OnceLock<Vec<EmbeddingVector>>,
    dim: OnceLock<usize>,
    gate: Gate,
}

impl HttpBackend {
    /// Reads the API key from the environment.
    pub fn new(config: EndpointConfig, personas: Vec<String>) -> Result<Self, BackendError> {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(config, personas, key)
    }

    pub fn with_api_key(
        config: EndpointConfig,
        personas: Vec<String>,
        api_key: Option<String>,
    ) -> Result<Self, BackendError> {
        config.validate().map_err(BackendError::InvalidRequest)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout))
            .build()
            .map_err(|e| BackendError::EndpointUnavailable(e.to_string()))?;
        let personas = personas
            .into_iter()
            .map(|p| p.trim().to_string())
            .filter(|p| !p.is_empty())
            .collect();
        Ok(Self {
            gate: Gate::new(config.max_connections),
            config,
            client,
            api_key,
            personas,
            persona_embeddings: OnceLock::new(),
            dim: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn post_once(&self, path: &str, body: &Value) -> Result<Value, Failure> {
        let _permit = self.gate.acquire();
        let mut req = self.client.post(self.config.url(path)).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                Failure::Transient(BackendError::Timeout(e.to_string()))
            } else if e.is_connect() || e.is_request() {
                Failure::Transient(BackendError::EndpointUnavailable(e.to_string()))
            } else {
                Failure::Fatal(BackendError::EndpointUnavailable(e.to_string()))
            }
        })?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 || status.as_u16() == 408 {
            return Err(Failure::Transient(BackendError::EndpointUnavailable(format!("HTTP {status}"))));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(BackendError::EndpointUnavailable(format!("HTTP {status}"))));
        }
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                Failure::Transient(BackendError::Timeout(e.to_string()))
            } else {
                Failure::Fatal(BackendError::MalformedResponse(e.to_string()))
            }
        })?;
        serde_json::from_str(&text).map_err(|e| Failure::Fatal(BackendError::MalformedResponse(e.to_string())))
    }

    /// POST with bounded retries and exponential backoff on transient failures.
    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let mut attempt = 0;
        loop {
            match self.post_once(path, body) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(e)) => {
                    if attempt >= self.config.max_retries {
                        return Err(match e {
                            BackendError::Timeout(m) => BackendError::Timeout(m),
                            other => BackendError::EndpointUnavailable(format!(
                                "{other} (after {} retries)",
                                self.config.max_retries
                            )),
                        });
                    }
                    let delay = self.config.backoff(attempt);
                    warn!("{path}: {e}; retry {} in {:.3}s", attempt + 1, delay.as_secs_f64());
                    thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }

    fn chat(&self, system: Option<&str>, user: &str, request: &BackendRequest) -> Result<String, BackendError> {
        let mut messages = Vec::new();
        if let Some(s) = system {
            messages.push(json!({"role": "system", "content": s}));
        }
        messages.push(json!({"role": "user", "content": user}));
        let body = json!({
            "model": self.config.model_name,
            "messages": messages,
            "max_tokens": request.max_tokens(),
            "temperature": self.config.temperature,
            "seed": request.seed(),
        });
        let v = self.post(&self.config.chat_path, &body)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::MalformedResponse("missing choices[0].message.content".into()))
    }

    fn persona_for(&self, modulation: &[f64]) -> Result<Option<&str>, BackendError> {
        if self.personas.is_empty() {
            return Ok(None);
        }
        let embs = match self.persona_embeddings.get() {
            Some(e) => e,
            None => {
                let e = self
                    .personas
                    .iter()
                    .map(|p| self.embed(p))
                    .collect::<Result<Vec<_>, _>>()?;
                self.persona_embeddings.get_or_init(|| e)
            }
        };
        let best = nearest(modulation, embs);
        debug!("persona {best} selected");
        Ok(Some(self.personas[best].as_str()))
    }
}

/// Index of the row with the highest cosine to `v`; the first wins ties.
fn nearest(v: &[f64], rows: &[EmbeddingVector]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, r) in rows.iter().enumerate() {
        let s = cosine(v, r.values());
        if s > best_sim {
            best = i;
            best_sim = s;
        }
    }
    best
}

/// First number in `text`, read as a 0-10 judgment and scaled to [0, 1].
pub(crate) fn parse_judgment(text: &str) -> Result<f64, BackendError> {
    let start = text
        .find(|c: char| c.is_ascii_digit())
        .ok_or_else(|| BackendError::MalformedResponse(format!("no score in `{text}`")))?;
    let tail = &text[start..];
    let end = tail
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(tail.len());
    let n: f64 = tail[..end]
        .trim_end_matches('.')
        .parse()
        .map_err(|_| BackendError::MalformedResponse(format!("unparseable score in `{text}`")))?;
    if !(0.0..=10.0).contains(&n) {
        return Err(BackendError::MalformedResponse(format!("score {n} outside 0-10")));
    }
    Ok(n / 10.0)
}

impl Backend for HttpBackend {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let start = Instant::now();
        let (text, scalar) = match request.role() {
            Role::ViewpointGeneration => {
                let modulation = request
                    .modulation()
                    .ok_or_else(|| BackendError::InvalidRequest("generation needs a modulation vector".into()))?;
                let persona = self.persona_for(modulation)?;
                (self.chat(persona, request.prompt_text(), request)?, None)
            }
            Role::Arbitration => (self.chat(None, request.prompt_text(), request)?, None),
            Role::CoherenceJudge => {
                let text = self.chat(None, request.prompt_text(), request)?;
                let score = parse_judgment(&text)?;
                (text, Some(score))
            }
        };
        Ok(BackendResponse {
            text,
            scalar,
            latency: start.elapsed().as_secs_f64(),
        })
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::EmptyText);
        }
        let model = self.config.embedding_model.as_ref().unwrap_or(&self.config.model_name);
        let v = self.post(&self.config.embeddings_path, &json!({"model": model, "input": text}))?;
        let values: Vec<f64> = v
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::MalformedResponse("missing data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| BackendError::MalformedResponse("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        let e = EmbeddingVector::normalized(values).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        let dim = *self.dim.get_or_init(|| e.dim());
        if e.dim() != dim {
            return Err(BackendError::MalformedResponse(format!(
                "embedding dimension changed from {dim} to {}",
                e.dim()
            )));
        }
        Ok(e)
    }

    fn dim(&self) -> Result<usize, BackendError> {
        if let Some(d) = self.dim.get() {
            return Ok(*d);
        }
        Ok(self.embed("dimension probe")?.dim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn judgment_parsing() {
        assert_eq!(parse_judgment("7").unwrap(), 0.7);
        assert_eq!(parse_judgment("Score: 8.5/10").unwrap(), 0.85);
        assert_eq!(parse_judgment("10.").unwrap(), 1.0);
        assert!(matches!(parse_judgment("great"), Err(BackendError::MalformedResponse(_))));
        assert!(parse_judgment("42").is_err());
    }

    #[test]
    fn backoff_doubles() {
        let c = EndpointConfig {
            backoff_base: 0.1,
            ..Default::default()
        };
        let d: Vec<f64> = (0..4).map(|a| c.backoff(a).as_secs_f64()).collect();
        assert!(d.windows(2).all(|w| w[1] > w[0]));
        assert!((d[3] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn config_limits() {
        let mut c = EndpointConfig::default();
        assert!(c.validate().is_ok());
        c.max_retries = 6;
        assert!(c.validate().is_err());
        c.max_retries = 2;
        c.timeout = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn nearest_prefers_first_on_ties() {
        let rows = vec![
            EmbeddingVector::new(vec![1.0, 0.0]).unwrap(),
            EmbeddingVector::new(vec![1.0, 0.0]).unwrap(),
            EmbeddingVector::new(vec![0.0, 1.0]).unwrap(),
        ];
        assert_eq!(nearest(&[1.0, 0.1], &rows), 0);
        assert_eq!(nearest(&[0.0, 1.0], &rows), 2);
    }
}
