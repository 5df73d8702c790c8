//! OpenAI-compatible HTTP backends for chat completions and embeddings.

use super::{ChatBackend, ChatRequest, EmbedBackend, GatewayError};
use std::time::Duration;

/// Serializes a chat request into the OpenAI-compatible wire body.
pub fn build_wire_body(req: &ChatRequest) -> serde_json::Value {
    let mut messages = Vec::new();
    if !req.system.is_empty() {
        messages.push(serde_json::json!({"role": "system", "content": req.system}));
    }
    messages.push(serde_json::json!({"role": "user", "content": req.user}));
    serde_json::json!({
        "model": req.model_id,
        "messages": messages,
        "temperature": req.temperature,
        "top_p": req.top_p,
        "max_tokens": req.max_tokens,
    })
}

pub struct HttpChatBackend {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
}

impl HttpChatBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("reqwest client");
        Self { client, base_url: base_url.into(), api_key }
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }
}

fn map_transport(err: reqwest::Error) -> GatewayError {
    if err.is_timeout() {
        GatewayError::Timeout
    } else {
        GatewayError::Transport(err.to_string())
    }
}

fn map_status(status: u16) -> GatewayError {
    if status == 429 {
        GatewayError::RateLimited
    } else {
        GatewayError::HttpError(status)
    }
}

impl ChatBackend for HttpChatBackend {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let mut builder = self
            .client
            .post(self.endpoint("chat/completions"))
            .json(&build_wire_body(req));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(map_transport)?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(map_status(status));
        }
        let body: serde_json::Value = response
            .json()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        body["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| GatewayError::Transport("reply missing choices[0].message.content".into()))
    }
}

pub struct HttpEmbedBackend {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
}

impl HttpEmbedBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("reqwest client");
        Self { client, base_url: base_url.into(), api_key }
    }
}

impl EmbedBackend for HttpEmbedBackend {
    fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let url = format!("{}/embeddings", self.base_url.trim_end_matches('/'));
        let mut builder = self
            .client
            .post(url)
            .json(&serde_json::json!({"model": model_id, "input": texts}));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(map_transport)?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(map_status(status));
        }
        let body: serde_json::Value = response
            .json()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let data = body["data"]
            .as_array()
            .ok_or_else(|| GatewayError::Transport("reply missing data array".into()))?;
        data.iter()
            .map(|item| {
                item["embedding"]
                    .as_array()
                    .map(|v| v.iter().filter_map(|x| x.as_f64()).collect())
                    .ok_or_else(|| GatewayError::Transport("item missing embedding".into()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_body_carries_expert_sampling_fields_verbatim() {
        let req = ChatRequest {
            model_id: "expert".into(),
            system: "sys".into(),
            user: "hello".into(),
            temperature: 1.0,
            top_p: 0.95,
            max_tokens: 8192,
        };
        let body = build_wire_body(&req);
        assert_eq!(body["temperature"], 1.0);
        assert_eq!(body["top_p"], 0.95);
        assert_eq!(body["max_tokens"], 8192);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "hello");
    }

    #[test]
    fn empty_system_is_omitted_from_messages() {
        let req = ChatRequest {
            model_id: "m".into(),
            system: String::new(),
            user: "u".into(),
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 16,
        };
        let body = build_wire_body(&req);
        assert_eq!(body["messages"].as_array().unwrap().len(), 1);
        assert_eq!(body["messages"][0]["role"], "user");
    }
}
