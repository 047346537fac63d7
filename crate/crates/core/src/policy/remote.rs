//! Chat-completions backend (OpenAI wire shape: `messages` + `tools`).

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{parse_completion, parse_structured_calls, Policy, PolicyError, PolicyRequest, PolicyTurn, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteChatConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: u64,
    pub max_tokens: Option<u32>,
}

impl Default for RemoteChatConfig {
    fn default() -> Self {
        RemoteChatConfig {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            model: "default".into(),
            token_env: "MEMTREE_POLICY_TOKEN".into(),
            timeout_secs: 120,
            max_tokens: None,
        }
    }
}

pub struct RemoteChatPolicy {
    config: RemoteChatConfig,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl RemoteChatPolicy {
    pub fn new(config: RemoteChatConfig) -> Result<Self, PolicyError> {
        let token = std::env::var(&config.token_env).ok().filter(|t| !t.is_empty());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| PolicyError::RemoteUnavailable(e.to_string()))?;
        Ok(RemoteChatPolicy { config, token, client })
    }

    pub fn request_body(&self, request: &PolicyRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                // Tool observations go back as user text: the history is
                // re-rendered each step, so there are no call ids to echo.
                let role = match m.role {
                    Role::System => "system",
                    Role::User | Role::Tool => "user",
                    Role::Assistant => "assistant",
                };
                json!({"role": role, "content": m.content})
            })
            .collect();
        let tools: Vec<Value> = request.tools.iter().map(|t| t.to_function_json()).collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "tools": tools,
            "temperature": request.temperature,
        });
        if let Some(seed) = request.sample_seed {
            body["seed"] = json!(seed);
        }
        if let Some(max) = self.config.max_tokens {
            body["max_tokens"] = json!(max);
        }
        body
    }
}

/// Extracts a [`PolicyTurn`] from a chat-completions response body.
pub fn turn_from_response(body: &Value) -> Result<PolicyTurn, PolicyError> {
    let message = body
        .pointer("/choices/0/message")
        .ok_or_else(|| PolicyError::RemoteUnavailable("response has no choices[0].message".into()))?;
    let content = message.get("content").and_then(Value::as_str).unwrap_or("");
    match message.get("tool_calls").and_then(Value::as_array) {
        Some(calls) if !calls.is_empty() => {
            let mut turn = parse_structured_calls(calls);
            turn.reasoning = content.trim().to_owned();
            Ok(turn)
        }
        _ => Ok(parse_completion(content)),
    }
}

impl Policy for RemoteChatPolicy {
    fn propose(&self, request: &PolicyRequest) -> Result<PolicyTurn, PolicyError> {
        if request.messages.is_empty() {
            return Err(PolicyError::EmptyContext);
        }
        let mut http = self.client.post(&self.config.endpoint).json(&self.request_body(request));
        if let Some(token) = &self.token {
            http = http.bearer_auth(token);
        }
        let response = http.send().map_err(|e| PolicyError::RemoteUnavailable(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(PolicyError::RemoteUnavailable(format!("HTTP {status}")));
        }
        let body: Value = response.json().map_err(|e| PolicyError::RemoteUnavailable(e.to_string()))?;
        turn_from_response(&body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structured_tool_calls_preferred() {
        let body = json!({"choices": [{"message": {
            "content": "look up facts",
            "tool_calls": [{"type": "function", "function": {"name": "search_facts", "arguments": "{\"query\":\"x\"}"}}]
        }}]});
        let turn = turn_from_response(&body).unwrap();
        assert_eq!(turn.reasoning, "look up facts");
        assert_eq!(turn.tool_calls[0].tool_name, "search_facts");
    }

    #[test]
    fn falls_back_to_text() {
        let body = json!({"choices": [{"message": {"content": "```tool_call\n{\"name\":\"finish\",\"arguments\":{\"answer\":\"Lyon\"}}\n```"}}]});
        let turn = turn_from_response(&body).unwrap();
        assert_eq!(turn.tool_calls[0].str_arg("answer"), Some("Lyon"));
    }

    #[test]
    fn unreachable_endpoint_is_an_error() {
        let policy = RemoteChatPolicy::new(RemoteChatConfig {
            endpoint: "http://127.0.0.1:9/v1/chat/completions".into(),
            timeout_secs: 2,
            ..Default::default()
        })
        .unwrap();
        let request = PolicyRequest {
            phase: super::super::Phase::Retrieval,
            messages: vec![super::super::ChatMessage::user("q")],
            tools: vec![],
            view: super::super::PhaseView::Retrieval { query: "q".into(), history: vec![], force_answer: false },
            temperature: 0.0,
            sample_seed: None,
        };
        assert!(matches!(policy.propose(&request), Err(PolicyError::RemoteUnavailable(_))));
    }
}
