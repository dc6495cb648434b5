//! Chat clients: the wire client for chat-completion services, plus a
//! scripted-file client for fully offline runs.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use crate::error::{Error, Result};

/// One generation request. `judge` carries the presented labels and the
/// designated answer so offline mocks can simulate judge behavior; it is
/// never serialized to the wire.
#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub template: String,
    pub family_id: String,
    pub prompt: String,
    pub judge: Option<JudgeHints>,
}

#[derive(Debug, Clone)]
pub struct JudgeHints {
    /// 1-based scenario index.
    pub scenario: u8,
    pub labels: Vec<char>,
    pub correct: char,
}

pub trait ChatClient: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String>;

    fn model_name(&self) -> &str {
        "unknown"
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatClientConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff")]
    pub backoff_secs: f64,
    #[serde(default)]
    pub temperature: f64,
}

fn default_parallel() -> usize {
    1
}
fn default_timeout() -> u64 {
    60
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff() -> f64 {
    1.0
}

impl ChatClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_parallel < 1 {
            return Err(Error::InvalidConfig("max_parallel must be >= 1".into()));
        }
        if self.timeout_secs == 0 {
            return Err(Error::InvalidConfig("timeout must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireContent,
}

#[derive(Deserialize)]
struct WireContent {
    content: String,
}

/// `POST {model, messages, temperature}` with a bearer token taken from the
/// configured environment variable; the response text is the first choice's
/// message content.
pub struct HttpChatClient {
    cfg: ChatClientConfig,
    api_key: String,
    http: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(cfg: ChatClientConfig) -> Result<Self> {
        cfg.validate()?;
        let api_key = std::env::var(&cfg.api_key_env).map_err(|_| {
            Error::InvalidConfig(format!(
                "environment variable {} is not set",
                cfg.api_key_env
            ))
        })?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Provider(e.to_string()))?;
        Ok(HttpChatClient { cfg, api_key, http })
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let body = WireRequest {
            model: &self.cfg.model_name,
            messages: vec![WireMessage {
                role: "user",
                content: &req.prompt,
            }],
            temperature: self.cfg.temperature,
        };
        let mut last_err = String::new();
        for attempt in 0..self.cfg.max_attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_secs_f64(
                    self.cfg.backoff_secs * f64::from(attempt),
                ));
            }
            let result = self
                .http
                .post(&self.cfg.endpoint_url)
                .bearer_auth(&self.api_key)
                .json(&body)
                .send()
                .and_then(|r| r.error_for_status());
            match result {
                Ok(resp) => {
                    let parsed: WireResponse = resp.json().map_err(|e| Error::ChatTransport {
                        family_id: req.family_id.clone(),
                        template: req.template.clone(),
                        msg: e.to_string(),
                    })?;
                    return parsed
                        .choices
                        .into_iter()
                        .next()
                        .map(|c| c.message.content)
                        .ok_or_else(|| Error::ChatTransport {
                            family_id: req.family_id.clone(),
                            template: req.template.clone(),
                            msg: "response had no choices".into(),
                        });
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::ChatTransport {
            family_id: req.family_id.clone(),
            template: req.template.clone(),
            msg: format!("failed after {} attempts: {last_err}", self.cfg.max_attempts),
        })
    }

    fn model_name(&self) -> &str {
        &self.cfg.model_name
    }
}

/// Offline client backed by a response file mapping
/// `{template_name: {family_id: response}}`.
pub struct ScriptedFileClient {
    responses: HashMap<String, HashMap<String, String>>,
    name: String,
}

impl ScriptedFileClient {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let responses = serde_json::from_str(&raw)?;
        Ok(ScriptedFileClient {
            responses,
            name: format!("scripted:{}", path.display()),
        })
    }

    pub fn from_map(responses: HashMap<String, HashMap<String, String>>) -> Self {
        ScriptedFileClient {
            responses,
            name: "scripted".into(),
        }
    }
}

impl ChatClient for ScriptedFileClient {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        self.responses
            .get(&req.template)
            .and_then(|m| m.get(&req.family_id))
            .cloned()
            .ok_or_else(|| Error::ScriptMiss {
                template: req.template.clone(),
                family_id: req.family_id.clone(),
            })
    }

    fn model_name(&self) -> &str {
        &self.name
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_client_lookup_and_miss() {
        let mut inner = HashMap::new();
        inner.insert("fam-1".to_string(), "Instruction: focus".to_string());
        let mut map = HashMap::new();
        map.insert("instruction_synthesis_pos".to_string(), inner);
        let client = ScriptedFileClient::from_map(map);
        let req = ChatRequest {
            template: "instruction_synthesis_pos".into(),
            family_id: "fam-1".into(),
            prompt: String::new(),
            judge: None,
        };
        assert_eq!(client.complete(&req).unwrap(), "Instruction: focus");
        let miss = ChatRequest {
            family_id: "fam-2".into(),
            ..req
        };
        assert!(matches!(client.complete(&miss), Err(Error::ScriptMiss { .. })));
    }

    #[test]
    fn config_invariants() {
        let cfg = ChatClientConfig {
            endpoint_url: "http://localhost".into(),
            model_name: "m".into(),
            api_key_env: "KEY".into(),
            max_parallel: 0,
            timeout_secs: 10,
            max_attempts: 1,
            backoff_secs: 0.0,
            temperature: 0.0,
        };
        assert!(cfg.validate().is_err());
    }
}
