//! Model output to [`ToolCall`]s. Two wire shapes: structured function-call
//! fields from a chat API, or fenced blocks inside completion text.

use std::collections::BTreeMap;

use serde_json::{Map, Value};

use super::{PolicyTurn, ToolCall};

/// Canonical serialization: `{"name": ..., "arguments": {...}}` with keys sorted.
pub fn canonical_call_text(call: &ToolCall) -> String {
    let sorted: BTreeMap<&String, &Value> = call.arguments.iter().collect();
    let mut out = String::from("{\"name\":");
    out.push_str(&Value::String(call.tool_name.clone()).to_string());
    out.push_str(",\"arguments\":");
    out.push_str(&serde_json::to_string(&sorted).expect("json values serialize"));
    out.push('}');
    out
}

fn call_from_object(obj: &Map<String, Value>, raw: &str) -> Option<ToolCall> {
    let name = obj
        .get("name")
        .or_else(|| obj.get("tool_name"))
        .or_else(|| obj.get("tool"))
        .and_then(Value::as_str)?;
    let arguments = match obj.get("arguments").or_else(|| obj.get("parameters")) {
        None => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        // Some APIs ship arguments as a JSON-encoded string.
        Some(Value::String(s)) => match serde_json::from_str::<Value>(s) {
            Ok(Value::Object(m)) => m,
            _ => return None,
        },
        Some(_) => return None,
    };
    Some(ToolCall {
        tool_name: name.to_owned(),
        arguments,
        raw_text: raw.to_owned(),
    })
}

fn failed_call(raw: &str) -> ToolCall {
    ToolCall {
        tool_name: String::new(),
        arguments: Map::new(),
        raw_text: raw.to_owned(),
    }
}

/// Parses the `tool_calls` array of a chat-completions message.
pub fn parse_structured_calls(calls: &[Value]) -> PolicyTurn {
    let mut turn = PolicyTurn::default();
    for call in calls {
        let raw = call.to_string();
        let parsed = call
            .get("function")
            .and_then(Value::as_object)
            .or_else(|| call.as_object())
            .and_then(|obj| call_from_object(obj, &raw));
        match parsed {
            Some(c) => turn.tool_calls.push(c),
            None => {
                turn.parse_failure.get_or_insert_with(|| "malformed function call".to_owned());
                turn.tool_calls.push(failed_call(&raw));
            }
        }
    }
    turn
}

/// Parses completion text. Fenced blocks tagged `tool_call` or `json` (or
/// untagged) carry one call object or an array of them; text outside the
/// fences is kept as reasoning. Without any fence the whole text is tried
/// as JSON.
pub fn parse_completion(text: &str) -> PolicyTurn {
    let mut turn = PolicyTurn::default();
    let mut reasoning = String::new();
    let mut blocks: Vec<&str> = Vec::new();
    let mut rest = text;
    let mut unterminated = false;
    while let Some(open) = rest.find("```") {
        reasoning.push_str(&rest[..open]);
        let after = &rest[open + 3..];
        let header_end = after.find('\n').unwrap_or(after.len());
        let tag = after[..header_end].trim();
        let body_start = (header_end + 1).min(after.len());
        match after[body_start..].find("```") {
            Some(close) => {
                let body = &after[body_start..body_start + close];
                if tag.is_empty() || tag == "json" || tag == "tool_call" || tag == "tool_code" {
                    blocks.push(body);
                } else {
                    reasoning.push_str(&rest[open..open + 3 + body_start + close + 3]);
                }
                rest = &after[body_start + close + 3..];
            }
            None => {
                blocks.push(&after[body_start..]);
                unterminated = true;
                rest = "";
            }
        }
    }
    reasoning.push_str(rest);

    if blocks.is_empty() {
        let trimmed = text.trim();
        if trimmed.starts_with('{') || trimmed.starts_with('[') {
            blocks.push(trimmed);
            reasoning.clear();
        }
    }
    turn.reasoning = reasoning.trim().to_owned();

    for block in blocks {
        let body = block.trim();
        match serde_json::from_str::<Value>(body) {
            Ok(Value::Object(obj)) => match call_from_object(&obj, body) {
                Some(c) => turn.tool_calls.push(c),
                None => {
                    turn.parse_failure.get_or_insert_with(|| "tool call object lacks a name".to_owned());
                    turn.tool_calls.push(failed_call(body));
                }
            },
            Ok(Value::Array(items)) => {
                for item in &items {
                    let raw = item.to_string();
                    match item.as_object().and_then(|o| call_from_object(o, &raw)) {
                        Some(c) => turn.tool_calls.push(c),
                        None => {
                            turn.parse_failure.get_or_insert_with(|| "malformed tool call in array".to_owned());
                            turn.tool_calls.push(failed_call(&raw));
                        }
                    }
                }
            }
            Ok(_) | Err(_) => {
                let reason = if unterminated { "unterminated fenced block" } else { "invalid JSON in tool call" };
                turn.parse_failure.get_or_insert_with(|| reason.to_owned());
                turn.tool_calls.push(failed_call(body));
            }
        }
    }
    if turn.tool_calls.is_empty() && turn.parse_failure.is_none() {
        turn.parse_failure = Some("no tool call found".to_owned());
    }
    turn
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn fenced_call_with_reasoning() {
        let text = "Need facts first.\n```tool_call\n{\"name\": \"search_facts\", \"arguments\": {\"query\": \"Alice employer\"}}\n```\n";
        let turn = parse_completion(text);
        assert_eq!(turn.reasoning, "Need facts first.");
        assert_eq!(turn.parse_failure, None);
        assert_eq!(turn.tool_calls.len(), 1);
        assert_eq!(turn.tool_calls[0].tool_name, "search_facts");
        assert_eq!(turn.tool_calls[0].str_arg("query"), Some("Alice employer"));
    }

    #[test]
    fn malformed_keeps_raw_text() {
        let text = "```json\n{\"name\": \"finish\", \"arguments\": {\"answer\": \n```";
        let turn = parse_completion(text);
        assert!(turn.parse_failure.is_some());
        assert_eq!(turn.tool_calls.len(), 1);
        assert_eq!(turn.tool_calls[0].tool_name, "");
        assert!(turn.tool_calls[0].raw_text.contains("\"finish\""));
    }

    #[test]
    fn bare_json_and_arrays() {
        let turn = parse_completion("[{\"name\":\"a\",\"arguments\":{}},{\"name\":\"b\"}]");
        assert_eq!(turn.parse_failure, None);
        let names: Vec<_> = turn.tool_calls.iter().map(|c| c.tool_name.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    fn plain_prose_is_a_failure() {
        let turn = parse_completion("I think the answer is Paris.");
        assert_eq!(turn.parse_failure.as_deref(), Some("no tool call found"));
        assert!(turn.tool_calls.is_empty());
        assert_eq!(turn.reasoning, "I think the answer is Paris.");
    }

    #[test]
    fn structured_calls_with_string_arguments() {
        let calls = vec![
            json!({"id": "c1", "type": "function", "function": {"name": "finish", "arguments": "{\"answer\": \"Paris\"}"}}),
            json!({"function": {"name": "finish", "arguments": "{oops"}}),
        ];
        let turn = parse_structured_calls(&calls);
        assert_eq!(turn.tool_calls[0].str_arg("answer"), Some("Paris"));
        assert_eq!(turn.tool_calls[1].tool_name, "");
        assert!(turn.parse_failure.is_some());
    }

    #[test]
    fn canonical_text_sorts_keys() {
        let mut args = Map::new();
        args.insert("z".into(), json!(1));
        args.insert("a".into(), json!("x"));
        let call = ToolCall::new("t", args);
        assert_eq!(call.raw_text, r#"{"name":"t","arguments":{"a":"x","z":1}}"#);
    }
}
