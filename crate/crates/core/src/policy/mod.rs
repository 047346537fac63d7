//! Policy contract: context in, tool calls out.
//!
//! Three interchangeable backends implement [`Policy`]: [`ScriptedPolicy`]
//! (deterministic rules), [`ReplayPolicy`] (recorded traces) and
//! [`RemoteChatPolicy`] (an OpenAI-style chat-completions endpoint).

mod parse;
mod registry;
mod remote;
mod replay;
pub mod rules;
mod scripted;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::memory::{MemoryItem, TurnRecord};
use crate::retrieval::RetrievalStep;

pub use parse::{canonical_call_text, parse_completion, parse_structured_calls};
pub use registry::{finish_only_registry, phase_registry, ParamSchema, ToolSchema};
pub use remote::{RemoteChatConfig, RemoteChatPolicy};
pub use replay::{RecordingPolicy, ReplayPolicy, ReplayRecord};
pub use scripted::ScriptedPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Formation,
    Evolution,
    Retrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }

    pub fn tool(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Tool, content: content.into() }
    }
}

/// Rough token estimate: four characters per token.
pub fn estimate_tokens(messages: &[ChatMessage]) -> usize {
    messages.iter().map(|m| m.content.chars().count()).sum::<usize>().div_ceil(4)
}

/// Stable fingerprint of a phase plus its rendered messages.
pub fn context_digest(phase: Phase, messages: &[ChatMessage]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(format!("{phase:?}").as_bytes());
    for m in messages {
        hasher.update([0u8]);
        hasher.update(format!("{:?}", m.role).as_bytes());
        hasher.update([0u8]);
        hasher.update(m.content.as_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool_name: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
    /// Verbatim model output segment this call was parsed from.
    #[serde(default)]
    pub raw_text: String,
}

impl ToolCall {
    pub fn new(tool_name: impl Into<String>, arguments: Map<String, Value>) -> Self {
        let mut call = ToolCall {
            tool_name: tool_name.into(),
            arguments,
            raw_text: String::new(),
        };
        call.raw_text = canonical_call_text(&call);
        call
    }

    /// Builds a call from string-valued arguments.
    pub fn with_strings(tool_name: &str, args: &[(&str, &str)]) -> Self {
        let arguments = args
            .iter()
            .map(|(k, v)| ((*k).to_owned(), Value::String((*v).to_owned())))
            .collect();
        ToolCall::new(tool_name, arguments)
    }

    pub fn str_arg(&self, name: &str) -> Option<&str> {
        self.arguments.get(name).and_then(Value::as_str)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyTurn {
    #[serde(default)]
    pub reasoning: String,
    #[serde(default)]
    pub tool_calls: Vec<ToolCall>,
    /// Set when model output could not be parsed; the raw text stays in `tool_calls[..].raw_text`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_failure: Option<String>,
}

/// Structured view of the context, mirrored in `messages`. Rule-based
/// backends read this; model backends read the messages.
#[derive(Debug, Clone, PartialEq)]
pub enum PhaseView {
    Formation {
        turns: Vec<TurnRecord>,
        working_summary: String,
    },
    Evolution {
        candidate: MemoryItem,
        neighbors: Vec<MemoryItem>,
    },
    Retrieval {
        query: String,
        history: Vec<RetrievalStep>,
        force_answer: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRequest {
    pub phase: Phase,
    pub messages: Vec<ChatMessage>,
    pub tools: Vec<ToolSchema>,
    pub view: PhaseView,
    pub temperature: f64,
    /// Per-call sampling seed; stochastic backends derive their randomness from it.
    pub sample_seed: Option<u64>,
}

impl PolicyRequest {
    pub fn digest(&self) -> String {
        context_digest(self.phase, &self.messages)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("remote policy unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("replay trace has no turn for this context")]
    ReplayExhausted,
    #[error("policy context is empty")]
    EmptyContext,
}

pub trait Policy: Send + Sync {
    fn propose(&self, request: &PolicyRequest) -> Result<PolicyTurn, PolicyError>;
}

impl<P: Policy + ?Sized> Policy for std::sync::Arc<P> {
    fn propose(&self, request: &PolicyRequest) -> Result<PolicyTurn, PolicyError> {
        (**self).propose(request)
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn propose(&self, request: &PolicyRequest) -> Result<PolicyTurn, PolicyError> {
        (**self).propose(request)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", content = "reason", rename_all = "snake_case")]
pub enum ValidationResult {
    Ok,
    Violation(String),
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        matches!(self, ValidationResult::Ok)
    }
}

/// Schema check: known tool, required arguments present, no unknown
/// arguments, argument value kinds matching the declared types.
pub fn validate(call: &ToolCall, registry: &[ToolSchema]) -> ValidationResult {
    let Some(schema) = registry.iter().find(|s| s.name == call.tool_name) else {
        return ValidationResult::Violation(format!("unknown tool: {}", call.tool_name));
    };
    for name in &schema.required {
        if !call.arguments.contains_key(name) {
            return ValidationResult::Violation(format!("missing required: {name}"));
        }
    }
    for (name, value) in &call.arguments {
        let Some(param) = schema.parameters.get(name) else {
            return ValidationResult::Violation(format!("unknown argument: {name}"));
        };
        let kind_ok = match param.kind.as_str() {
            "string" => value.is_string(),
            "integer" => value.as_i64().is_some() || value.as_u64().is_some(),
            "number" => value.is_number(),
            "boolean" => value.is_boolean(),
            _ => true,
        };
        if !kind_ok {
            return ValidationResult::Violation(format!(
                "argument {name}: expected {}",
                param.kind
            ));
        }
    }
    ValidationResult::Ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn finish_with_answer_is_valid() {
        let registry = phase_registry(Phase::Retrieval);
        let call = ToolCall::with_strings("finish", &[("answer", "Paris")]);
        assert_eq!(validate(&call, &registry), ValidationResult::Ok);
    }

    #[test]
    fn missing_required_query() {
        let registry = phase_registry(Phase::Retrieval);
        let call = ToolCall::new("search_facts", Map::new());
        assert_eq!(
            validate(&call, &registry),
            ValidationResult::Violation("missing required: query".into())
        );
    }

    #[test]
    fn unknown_tool_and_argument() {
        let registry = phase_registry(Phase::Retrieval);
        let call = ToolCall::with_strings("search_web", &[("query", "x")]);
        assert!(!validate(&call, &registry).is_ok());
        let call = ToolCall::with_strings("search_facts", &[("query", "x"), ("k", "3")]);
        assert_eq!(
            validate(&call, &registry),
            ValidationResult::Violation("unknown argument: k".into())
        );
    }

    #[test]
    fn argument_kinds_checked() {
        let registry = phase_registry(Phase::Retrieval);
        let mut args = Map::new();
        args.insert("query".into(), json!("x"));
        args.insert("top_k".into(), json!("five"));
        assert!(!validate(&ToolCall::new("search_turns", args.clone()), &registry).is_ok());
        args.insert("top_k".into(), json!(3));
        assert!(validate(&ToolCall::new("search_turns", args), &registry).is_ok());
    }

    #[test]
    fn digest_depends_on_content() {
        let a = context_digest(Phase::Formation, &[ChatMessage::user("x")]);
        let b = context_digest(Phase::Formation, &[ChatMessage::user("y")]);
        let c = context_digest(Phase::Evolution, &[ChatMessage::user("x")]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, context_digest(Phase::Formation, &[ChatMessage::user("x")]));
    }
}
