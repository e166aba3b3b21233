//! OpenAI-compatible `/chat/completions` and `/embeddings` backend.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{ChatBackend, ChatRequest, Completion, EmbeddingBackend, GatewayError, Usage};

fn default_timeout() -> u64 {
    120
}
fn default_retries() -> u32 {
    3
}
fn default_concurrency() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub base_url: String,
    #[serde(rename = "model")]
    pub model_id: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    /// Extra request-body fields passed through verbatim, e.g.
    /// `chat_template_kwargs = { enable_thinking = false }`.
    #[serde(default)]
    pub extra: Map<String, Value>,
}

impl BackendConfig {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_id: model_id.into(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_concurrency: default_concurrency(),
            extra: Map::new(),
        }
    }
}

pub struct OpenAiCompatible {
    config: BackendConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl OpenAiCompatible {
    pub fn new(config: BackendConfig) -> Result<Self, GatewayError> {
        let api_key = match &config.api_key_env {
            Some(var) => {
                Some(std::env::var(var).map_err(|_| GatewayError::MissingApiKey(var.clone()))?)
            }
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self {
            config,
            api_key,
            http,
        })
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{path}", self.config.base_url.trim_end_matches('/'))
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let mut req = self.http.post(self.endpoint(path)).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .text()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| GatewayError::Malformed(format!("{e}: {text}"))),
            401 | 403 => Err(GatewayError::Auth { status }),
            _ => Err(GatewayError::Http { status, body: text }),
        }
    }

    pub(crate) fn chat_body(&self, request: &ChatRequest) -> Value {
        let p = &request.params;
        let mut body = json!({
            "model": self.config.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": p.temperature,
            "top_p": p.top_p,
            "frequency_penalty": p.frequency_penalty,
            "max_tokens": p.max_tokens,
        });
        let obj = body.as_object_mut().expect("object");
        if let Some(k) = p.top_k {
            obj.insert("top_k".into(), json!(k));
        }
        if let Some(m) = p.min_p {
            obj.insert("min_p".into(), json!(m));
        }
        for (k, v) in &self.config.extra {
            obj.insert(k.clone(), v.clone());
        }
        body
    }
}

impl ChatBackend for OpenAiCompatible {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let v = self.post("chat/completions", &self.chat_body(request))?;
        let text = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| {
                GatewayError::Malformed(format!("no choices[0].message.content in {v}"))
            })?
            .to_string();
        let usage = v.get("usage").map(|u| Usage {
            prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
            completion_tokens: u
                .get("completion_tokens")
                .and_then(Value::as_u64)
                .unwrap_or(0),
        });
        Ok(Completion { text, usage })
    }
}

impl EmbeddingBackend for OpenAiCompatible {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let mut body = json!({"model": self.config.model_id, "input": texts});
        for (k, v) in &self.config.extra {
            body.as_object_mut()
                .expect("object")
                .insert(k.clone(), v.clone());
        }
        let v = self.post("embeddings", &body)?;
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| GatewayError::Malformed(format!("no data array in {v}")))?;
        let mut rows: Vec<(u64, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item
                .get("index")
                .and_then(Value::as_u64)
                .unwrap_or(pos as u64);
            let emb = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| GatewayError::Malformed("embedding is not an array".into()))?
                .iter()
                .map(|x| {
                    x.as_f64()
                        .ok_or_else(|| GatewayError::Malformed("non-numeric embedding".into()))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            rows.push((index, emb));
        }
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}
