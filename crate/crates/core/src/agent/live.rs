use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{AgentRequest, Backend, BackendError};

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// Full chat-completions URL, e.g. `http://host:8000/v1/chat/completions`.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, reqwest::Error> {
        let client = reqwest::blocking::Client::builder().timeout(config.timeout).build()?;
        Ok(LiveBackend { config, client })
    }
}

fn mime_for(path: &str) -> &'static str {
    let lower = path.to_ascii_lowercase();
    if lower.ends_with(".jpg") || lower.ends_with(".jpeg") {
        "image/jpeg"
    } else if lower.ends_with(".webp") {
        "image/webp"
    } else if lower.ends_with(".gif") {
        "image/gif"
    } else {
        "image/png"
    }
}

fn image_url(image_ref: &str) -> Result<String, BackendError> {
    if image_ref.starts_with("http://") || image_ref.starts_with("https://") || image_ref.starts_with("data:") {
        return Ok(image_ref.to_string());
    }
    let bytes = std::fs::read(image_ref).map_err(|e| BackendError::Fatal {
        status: None,
        message: format!("reading image {image_ref}: {e}"),
    })?;
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{};base64,{encoded}", mime_for(image_ref)))
}

/// Chat-completion request body. Local image files are inlined as base64
/// data URLs; remote URLs pass through unchanged.
pub fn chat_request_body(model: &str, request: &AgentRequest) -> Result<Value, BackendError> {
    let user = if request.image_refs.is_empty() {
        Value::String(request.prompt.clone())
    } else {
        let mut parts = vec![json!({"type": "text", "text": request.prompt})];
        for r in &request.image_refs {
            parts.push(json!({"type": "image_url", "image_url": {"url": image_url(r)?}}));
        }
        Value::Array(parts)
    };
    Ok(json!({
        "model": model,
        "messages": [
            {"role": "system", "content": request.system},
            {"role": "user", "content": user},
        ],
        "temperature": request.temperature,
    }))
}

fn reply_text(body: &Value) -> Option<String> {
    let content = body.pointer("/choices/0/message/content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        Value::Null => Some(String::new()),
        _ => None,
    }
}

fn is_transient(status: u16) -> bool {
    status == 408 || status == 429 || (500..600).contains(&status)
}

impl Backend for LiveBackend {
    fn send(&self, request: &AgentRequest) -> Result<String, BackendError> {
        let body = chat_request_body(&self.config.model, request)?;
        let mut call = self.client.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.config.api_key {
            call = call.bearer_auth(key);
        }
        let response = call.send().map_err(|e| BackendError::Transient {
            status: None,
            message: e.to_string(),
        })?;
        let status = response.status().as_u16();
        let text = response.text().map_err(|e| BackendError::Transient {
            status: Some(status),
            message: e.to_string(),
        })?;
        if !(200..300).contains(&status) {
            let message = format!("HTTP {status}: {}", text.chars().take(200).collect::<String>());
            return Err(if is_transient(status) {
                BackendError::Transient {
                    status: Some(status),
                    message,
                }
            } else {
                BackendError::Fatal {
                    status: Some(status),
                    message,
                }
            });
        }
        let parsed: Value = serde_json::from_str(&text).map_err(|e| BackendError::Fatal {
            status: Some(status),
            message: format!("reply is not JSON: {e}"),
        })?;
        reply_text(&parsed).ok_or_else(|| BackendError::Fatal {
            status: Some(status),
            message: "reply lacks choices[0].message.content".into(),
        })
    }
}
