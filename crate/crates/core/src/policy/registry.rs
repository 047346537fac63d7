//! Tool schemas for the three memory phases. Descriptions are fixed text;
//! the framing prompt around them is configurable elsewhere.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::Phase;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSchema {
    #[serde(rename = "type")]
    pub kind: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    pub parameters: IndexMap<String, ParamSchema>,
    pub required: Vec<String>,
}

impl ToolSchema {
    fn new(name: &str, description: &str, params: &[(&str, &str, &str)], required: &[&str]) -> Self {
        ToolSchema {
            name: name.to_owned(),
            description: description.to_owned(),
            parameters: params
                .iter()
                .map(|(n, k, d)| {
                    ((*n).to_owned(), ParamSchema { kind: (*k).to_owned(), description: (*d).to_owned() })
                })
                .collect(),
            required: required.iter().map(|s| (*s).to_owned()).collect(),
        }
    }

    /// OpenAI-style `tools` array entry.
    pub fn to_function_json(&self) -> serde_json::Value {
        let properties: serde_json::Map<String, serde_json::Value> = self
            .parameters
            .iter()
            .map(|(n, p)| {
                (n.clone(), serde_json::json!({"type": p.kind, "description": p.description}))
            })
            .collect();
        serde_json::json!({
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": {
                    "type": "object",
                    "properties": properties,
                    "required": self.required,
                }
            }
        })
    }
}

const TIME_START: &str = "The time when the event occurred or the time when the attribute is valid. Use an empty string if it does not exist.";
const TIME_END: &str = "The end time of the event or the expiration time of the attribute. Use an empty string if it does not exist.";

fn formation() -> Vec<ToolSchema> {
    vec![
        ToolSchema::new(
            "create_fact",
            "Extract 'Factual Memory' (Concrete, verifiable statements about WHAT happened).\n\
             CRITICAL RULES:\n\
             1. Full Entity Scan: Extract attributes and relationships between all entities mentioned (e.g., specific objects, places, third parties), not just the user.\n\
             2. Pay special attention to time information, including relative times like 'yesterday' or 'the week before' in the text.\n\
             Target two specific types of facts:\n\
             1. User Factual Memory: Verifiable facts about the user's events experienced, identity, preferences, items owned, and specific constraints.\n\
             2. Environment Factual Memory: Explicit states of the external world, object properties, document knowledge, or tool states, and other entities.\n",
            &[
                ("fact", "string", "The concise, standalone declarative statement. E.g., 'The user prefers Python for backend tasks' or 'The API endpoint v2 is deprecated'."),
                ("start_time", "string", TIME_START),
                ("end_time", "string", TIME_END),
            ],
            &["fact", "start_time", "end_time"],
        ),
        ToolSchema::new(
            "create_experience",
            "Extract 'Experiential Memory' (Actionable lessons, patterns, or HOW-TO perform a task)\n\
             This tool captures lessons learned, reasoning patterns, and executable skills.\n\
             1. Strategy-based: Reusable heuristics, workflows, or insights derived from reasoning (e.g., 'To solve X, method Y is most efficient').\n\
             2. Case-based: Key trajectories of Success or Failure that serve as examples (e.g., 'Attempting action A under condition B caused error C').\n\
             3. Skill-based: Validated code snippets, tool usage protocols, or functions that the agent can execute.\n",
            &[
                ("experience", "string", "The distilled content of the experience. It should be formulated as a rule, a cause-effect relationship, or a guideline for future actions."),
                ("start_time", "string", TIME_START),
                ("end_time", "string", TIME_END),
            ],
            &["experience", "start_time", "end_time"],
        ),
        ToolSchema::new(
            "update_persona",
            "If there is new and important information about the person, such as hobbies, participated projects or significant events, update(add or modify) the full character profile for that person.",
            &[
                ("name", "string", "Name of the person. Or 'User' if the user does not have a specified name."),
                ("profile", "string", "The full, concise and updated persona text."),
            ],
            &["name", "profile"],
        ),
        ToolSchema::new(
            "update_summary",
            "If there is new information based on the current conversation, update the runtime summary of the sessions.",
            &[("content", "string", "The concise, complete and updated summary text.")],
            &["content"],
        ),
    ]
}

fn evolution() -> Vec<ToolSchema> {
    vec![
        ToolSchema::new(
            "add_item",
            "Add a new memory item.",
            &[
                ("document", "string", "The content."),
                ("turn_time", "string", "The time of the turn that generated this item."),
                ("start_time", "string", "Start time."),
                ("end_time", "string", "End time."),
            ],
            &["document"],
        ),
        ToolSchema::new(
            "update_item",
            "Update an existing memory item.",
            &[
                ("id", "string", "The ID of the item to update."),
                ("document", "string", "Enrich the content with more details and update the statistical data or factual frequencies mentioned. Must save the original time information of previously items in the document."),
                ("turn_time", "string", "The time of the turn that generated this update."),
                ("start_time", "string", "New start time."),
                ("end_time", "string", "New end time."),
            ],
            &["id", "document"],
        ),
        ToolSchema::new(
            "delete_item",
            "Delete an existing memory item. Use when an item is explicitly negated or wrong.",
            &[("id", "string", "The ID to delete.")],
            &["id"],
        ),
        ToolSchema::new(
            "ignore_item",
            "Do nothing. If the item is completely redundant in both *semantic meaning* and *time range*.",
            &[("reason", "string", "Reason for ignoring.")],
            &["reason"],
        ),
    ]
}

fn retrieval() -> Vec<ToolSchema> {
    vec![
        ToolSchema::new(
            "search_summary",
            "Retrieve relevant summaries to quickly understand the context background.",
            &[("query", "string", "Query string.")],
            &["query"],
        ),
        ToolSchema::new(
            "search_facts",
            "Retrieve 'Factual Memory' (Concrete, verifiable statements about WHAT happened).\n\
             Target two specific types of facts:\n\
             1. User Factual Memory: Verifiable facts about the user's identity, stable preferences, important events, habits, \
             historical commitments, and specific constraints.\n\
             2. Environment Factual Memory: Explicit states of the external world, object properties, \
             document knowledge, or tool states.\n",
            &[(
                "query",
                "string",
                "A self-contained, semantically rich search query rewritten from the user's intent.\n\
                 Instead of raw questions like 'Does he like it?', use specific declarative queries like \
                 'User preference regarding spicy food' or 'Attributes of Object X'.",
            )],
            &["query"],
        ),
        ToolSchema::new(
            "search_experiences",
            "Extract 'Experiential Memory' (Actionable lessons, patterns, or HOW-TO perform a task)\n\
             This tool captures lessons learned, reasoning patterns, and executable skills.:\n\
             1. Strategy-based: Reusable heuristics, workflows, or insights derived from reasoning (e.g., 'To solve X, method Y is most efficient').\n\
             2. Case-based: Key trajectories of Success or Failure that serve as examples (e.g., 'Attempting action A under condition B caused error C').\n\
             3. Skill-based: Validated code snippets, tool usage protocols, or functions that the agent can execute.\n\
             Avoid recording raw dialogue history; focus on the distilled 'Lesson' or 'Rule'.",
            &[(
                "query",
                "string",
                "A self-contained, semantically rich search query rewritten from the user's intent. \n\
                 Formulate problem-solving queries like 'Standard workflow for analyzing finance reports' \
                 or 'How to handle TimeoutError in API calls'.",
            )],
            &["query"],
        ),
        ToolSchema::new(
            "search_personas",
            "Retrieve character profiles or insights for specific individuals.",
            &[
                ("name", "string", "Name of the target individual for exact lookup."),
                ("query", "string", "Query string to find personas by traits; ignored if 'name' is provided."),
            ],
            &["query"],
        ),
        ToolSchema::new(
            "search_turns",
            "Retrieve specific raw dialogue history (Raw Turns). \n\
             Use this tool for questions about specific past conversations, verifying exact quotes, or checking 'what was' in detail. \n\
             Raw turns provide the most authentic context that summaries or facts might miss.",
            &[
                ("query", "string", "Keywords or specific quotes."),
                ("top_k", "integer", "The number of turns to retrieve. Default is 5."),
            ],
            &["query"],
        ),
        finish_schema(),
    ]
}

fn finish_schema() -> ToolSchema {
    ToolSchema::new(
        "finish",
        "Call this when you are confident that you can give the correct final answer. Or you should continue to retrieve more information.",
        &[("answer", "string", "The concise answer following the Final Result Format.")],
        &["answer"],
    )
}

pub fn phase_registry(phase: Phase) -> Vec<ToolSchema> {
    match phase {
        Phase::Formation => formation(),
        Phase::Evolution => evolution(),
        Phase::Retrieval => retrieval(),
    }
}

/// Tool list offered for the forced answer at the step cap.
pub fn finish_only_registry() -> Vec<ToolSchema> {
    vec![finish_schema()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn phase_sizes() {
        assert_eq!(phase_registry(Phase::Formation).len(), 4);
        assert_eq!(phase_registry(Phase::Evolution).len(), 4);
        assert_eq!(phase_registry(Phase::Retrieval).len(), 6);
    }

    #[test]
    fn ignore_item_text() {
        let evo = phase_registry(Phase::Evolution);
        let ignore = evo.iter().find(|s| s.name == "ignore_item").unwrap();
        assert!(ignore.description.starts_with("Do nothing."));
        assert!(ignore.description.contains("completely redundant"));
    }

    #[test]
    fn required_subset_and_unique_names() {
        for phase in [Phase::Formation, Phase::Evolution, Phase::Retrieval] {
            let reg = phase_registry(phase);
            let names: BTreeSet<_> = reg.iter().map(|s| s.name.clone()).collect();
            assert_eq!(names.len(), reg.len());
            for s in &reg {
                for r in &s.required {
                    assert!(s.parameters.contains_key(r), "{} requires unknown {r}", s.name);
                }
            }
        }
    }
}
