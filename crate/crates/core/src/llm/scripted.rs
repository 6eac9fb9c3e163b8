use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{ChatModel, ChatRequest, ChatResponse, GatewayError, Role, Usage};

/// Canned responses for requests whose system and last user message contain
/// the given substrings. Responses are handed out in order, `n_samples` per
/// call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default)]
    pub system_contains: String,
    #[serde(default)]
    pub user_contains: String,
    pub responses: Vec<String>,
}

impl ScriptRule {
    pub fn new(system_contains: impl Into<String>, user_contains: impl Into<String>, responses: Vec<String>) -> Self {
        ScriptRule { system_contains: system_contains.into(), user_contains: user_contains.into(), responses }
    }

    fn matches(&self, req: &ChatRequest) -> bool {
        let system: String = req.messages.iter().filter(|m| m.role == Role::System).map(|m| m.content.as_str()).collect();
        let user = req.messages.iter().rev().find(|m| m.role == Role::User).map_or("", |m| m.content.as_str());
        system.contains(&self.system_contains) && user.contains(&self.user_contains)
    }
}

/// Deterministic model for fixtures and tests. The first matching rule with
/// responses left answers; when none is left the call is a refusal.
#[derive(Debug, Default)]
pub struct ScriptedModel {
    rules: Mutex<Vec<(ScriptRule, usize)>>,
}

impl ScriptedModel {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        ScriptedModel { rules: Mutex::new(rules.into_iter().map(|r| (r, 0)).collect()) }
    }

    /// Responses not yet handed out, summed over all rules.
    pub fn remaining(&self) -> usize {
        self.rules.lock().iter().map(|(r, used)| r.responses.len() - used).sum()
    }
}

impl ChatModel for ScriptedModel {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let n = req.n_samples as usize;
        let mut rules = self.rules.lock();
        let Some((rule, used)) = rules.iter_mut().find(|(r, used)| *used < r.responses.len() && r.matches(req)) else {
            return Err(GatewayError::Refusal);
        };
        let end = (*used + n).min(rule.responses.len());
        let mut samples: Vec<String> = rule.responses[*used..end].to_vec();
        *used = end;
        // Short scripts pad with empty samples so |samples| = n holds.
        samples.resize(n, String::new());
        if samples.iter().all(|s| s.trim().is_empty()) {
            return Err(GatewayError::Refusal);
        }
        Ok(ChatResponse { samples, usage: Usage::default(), provider_meta: Default::default() })
    }
}
