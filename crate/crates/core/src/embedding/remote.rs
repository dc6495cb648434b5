//! Client for remote embedding services speaking the common
//! `POST {model, input: [texts]}` -> `{data: [{embedding: [...]}]}` protocol.
//! Single-vector responses are wrapped as 1-token matrices.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::time::Duration;

use super::{EmbeddingProvider, TokenMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff")]
    pub backoff_secs: f64,
    /// Upper bound on texts per request.
    #[serde(default = "default_batch")]
    pub max_batch: usize,
}

fn default_timeout() -> u64 {
    30
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff() -> f64 {
    1.0
}
fn default_batch() -> usize {
    64
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedItem>,
}

#[derive(Deserialize)]
struct EmbedItem {
    embedding: Vec<f64>,
}

pub struct RemoteEmbedder {
    cfg: RemoteConfig,
    dim: usize,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(cfg: RemoteConfig, dim: usize) -> Result<Self> {
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::InvalidConfig(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Provider(e.to_string()))?;
        Ok(RemoteEmbedder {
            cfg,
            dim,
            api_key,
            http,
        })
    }

    fn request_chunk(&self, texts: &[&str]) -> Result<Vec<TokenMatrix>> {
        let body = EmbedRequest {
            model: &self.cfg.model_name,
            input: texts,
        };
        let mut last_err = String::new();
        for attempt in 0..self.cfg.max_attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_secs_f64(
                    self.cfg.backoff_secs * f64::from(attempt),
                ));
            }
            let mut req = self.http.post(&self.cfg.endpoint_url).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send().and_then(|r| r.error_for_status()) {
                Ok(resp) => {
                    let parsed: EmbedResponse =
                        resp.json().map_err(|e| Error::Provider(e.to_string()))?;
                    if parsed.data.len() != texts.len() {
                        return Err(Error::Provider(format!(
                            "service returned {} embeddings for {} inputs",
                            parsed.data.len(),
                            texts.len()
                        )));
                    }
                    return parsed
                        .data
                        .into_iter()
                        .map(|item| {
                            if item.embedding.len() != self.dim {
                                return Err(Error::DimMismatch {
                                    expected: self.dim,
                                    got: item.embedding.len(),
                                    context: "remote embedding".into(),
                                });
                            }
                            let rows =
                                Array2::from_shape_vec((1, self.dim), item.embedding).unwrap();
                            TokenMatrix::new(rows)
                        })
                        .collect();
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::Provider(format!(
            "remote embedding failed after {} attempts: {last_err}",
            self.cfg.max_attempts
        )))
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<TokenMatrix> {
        Ok(self.request_chunk(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<TokenMatrix>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.cfg.max_batch.max(1)) {
            out.extend(self.request_chunk(chunk)?);
        }
        Ok(out)
    }
}
