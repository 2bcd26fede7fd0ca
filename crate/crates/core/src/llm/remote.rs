//! JSON chat-completion over HTTP(S).

use std::time::Duration;

use serde_json::{json, Value};

use super::{AttemptError, ChatProvider, ChatRequest, LlmError, ProviderConfig, Role, WireFormat};

pub struct RemoteProvider {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key_env: String,
    wire: WireFormat,
}

impl RemoteProvider {
    pub fn new(config: &ProviderConfig) -> Result<Self, LlmError> {
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| LlmError::InvalidConfig("remote provider needs an endpoint".into()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::InvalidConfig(format!("http client: {e}")))?;
        Ok(Self {
            client,
            endpoint,
            model: config.model_name.clone(),
            api_key_env: config.api_key_env.clone(),
            wire: config.wire.clone(),
        })
    }

    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let mut messages = vec![json!({ "role": "system", "content": request.system_prompt })];
        for turn in &request.turns {
            let role = match turn.role {
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            messages.push(json!({ "role": role, "content": turn.text }));
        }
        let mut body = serde_json::Map::new();
        body.insert("model".into(), json!(self.model));
        body.insert(self.wire.messages_field.clone(), Value::Array(messages));
        body.insert("temperature".into(), json!(request.temperature));
        body.insert(self.wire.max_tokens_field.clone(), json!(request.max_output_tokens));
        Value::Object(body)
    }
}

impl ChatProvider for RemoteProvider {
    fn id(&self) -> String {
        format!("remote:{}", self.model)
    }

    fn send(&self, request: &ChatRequest) -> Result<String, AttemptError> {
        let mut req = self.client.post(&self.endpoint).json(&self.request_body(request));
        if let Ok(key) = std::env::var(&self.api_key_env) {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            AttemptError::Transient(if e.is_timeout() { "timeout".into() } else { "transport failure".into() })
        })?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptError::Transient(format!("status {}", status.as_u16())));
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(LlmError::ProviderRejected(format!("status {}", status.as_u16()))));
        }
        let body: Value = resp.json().map_err(|_| AttemptError::Transient("response is not JSON".into()))?;
        body.pointer(&self.wire.response_pointer)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| AttemptError::Transient(format!("no text at {}", self.wire.response_pointer)))
    }
}
