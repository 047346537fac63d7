//! Deterministic rule-based policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use super::rules;
use super::{Policy, PolicyError, PolicyRequest, PolicyTurn, PhaseView, ToolCall};

/// Rule policy for all three phases.
///
/// With `temperature > 0` and a sample seed, retrieval steps deviate from the
/// rule choice with probability `exploration * min(temperature, 1)`, picking
/// uniformly among alternative searches or an early finish. `format_noise`
/// is the probability of dropping every argument of the chosen call, which
/// yields schema violations on purpose. Both draws come only from the
/// request's seed, so the policy stays a pure function of its input.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedPolicy {
    pub exploration: f64,
    pub format_noise: f64,
}

impl Default for ScriptedPolicy {
    fn default() -> Self {
        ScriptedPolicy { exploration: 0.35, format_noise: 0.0 }
    }
}

impl ScriptedPolicy {
    /// Never explores and never emits malformed calls.
    pub fn greedy() -> Self {
        ScriptedPolicy { exploration: 0.0, format_noise: 0.0 }
    }

    fn retrieval(&self, request: &PolicyRequest, query: &str, history: &[crate::retrieval::RetrievalStep], force: bool) -> PolicyTurn {
        let mut call = rules::retrieval_call(query, history, force);
        let mut reasoning = if call.tool_name == "finish" {
            "Answer from gathered memories.".to_owned()
        } else {
            format!("Next: {} for the question.", call.tool_name)
        };
        if let (Some(seed), true) = (request.sample_seed, request.temperature > 0.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = self.exploration * request.temperature.min(1.0);
            if !force && rng.gen::<f64>() < p {
                let alts = rules::retrieval_alternatives(query, history);
                call = alts[rng.gen_range(0..alts.len())].clone();
                reasoning = format!("Exploring {}.", call.tool_name);
            }
            if rng.gen::<f64>() < self.format_noise {
                call = ToolCall {
                    arguments: serde_json::Map::new(),
                    raw_text: format!("{{\"name\":{}}}", Value::String(call.tool_name.clone())),
                    tool_name: call.tool_name,
                };
            }
        }
        PolicyTurn { reasoning, tool_calls: vec![call], parse_failure: None }
    }
}

impl Policy for ScriptedPolicy {
    fn propose(&self, request: &PolicyRequest) -> Result<PolicyTurn, PolicyError> {
        if request.messages.is_empty() {
            return Err(PolicyError::EmptyContext);
        }
        Ok(match &request.view {
            PhaseView::Formation { turns, working_summary } => {
                let calls = rules::formation_calls(turns, working_summary);
                PolicyTurn {
                    reasoning: format!("{} memory operations for this chunk.", calls.len()),
                    tool_calls: calls,
                    parse_failure: None,
                }
            }
            PhaseView::Evolution { candidate, neighbors } => PolicyTurn {
                reasoning: format!("Compared against {} related memories.", neighbors.len()),
                tool_calls: vec![rules::evolution_call(candidate, neighbors)],
                parse_failure: None,
            },
            PhaseView::Retrieval { query, history, force_answer } => {
                self.retrieval(request, query, history, *force_answer)
            }
        })
    }
}
