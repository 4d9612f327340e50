use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{GeneratorError, GeneratorUsage, GoalQuery, HypothesisGenerator, LocationQuery, RawGoal, RawLocation};

const GOAL_SYSTEM_PROMPT: &str = include_str!("../../prompts/goal_system.txt");
const LOCATION_SYSTEM_PROMPT: &str = include_str!("../../prompts/location_system.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// Chat-completions URL.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    /// Extra attempts after a transport or parse failure.
    pub max_retries: u32,
    pub max_concurrent: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4.1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            temperature: 0.1,
            timeout_secs: 120,
            max_retries: 3,
            max_concurrent: 4,
        }
    }
}

/// Chat-completion client speaking the OpenAI wire format.
pub struct LlmGenerator {
    config: LlmConfig,
    api_key: String,
    agent: ureq::Agent,
    usage: Mutex<GeneratorUsage>,
    in_flight: Mutex<usize>,
    slot_freed: Condvar,
}

struct Permit<'a>(&'a LlmGenerator);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("permit lock") -= 1;
        self.0.slot_freed.notify_one();
    }
}

impl LlmGenerator {
    /// Reads the API key from the configured environment variable.
    pub fn from_env(config: LlmConfig) -> Result<Self, GeneratorError> {
        let key = std::env::var(&config.api_key_env)
            .map_err(|_| GeneratorError::Config(format!("environment variable {} is not set", config.api_key_env)))?;
        Self::with_key(config, key)
    }

    pub fn with_key(config: LlmConfig, api_key: String) -> Result<Self, GeneratorError> {
        if config.max_concurrent == 0 {
            return Err(GeneratorError::Config("max_concurrent must be at least 1".into()));
        }
        if !(0.0..=2.0).contains(&config.temperature) {
            return Err(GeneratorError::Config(format!("temperature {} out of range", config.temperature)));
        }
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(config.timeout_secs.max(1))).build();
        Ok(LlmGenerator {
            config,
            api_key,
            agent,
            usage: Mutex::new(GeneratorUsage::default()),
            in_flight: Mutex::new(0),
            slot_freed: Condvar::new(),
        })
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("permit lock");
        while *n >= self.config.max_concurrent {
            n = self.slot_freed.wait(n).expect("permit lock");
        }
        *n += 1;
        Permit(self)
    }

    fn chat(&self, messages: &[Value]) -> Result<String, GeneratorError> {
        let _permit = self.acquire();
        let started = Instant::now();
        let body = json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": messages,
        });
        let result = self
            .agent
            .post(&self.config.endpoint)
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body);
        let mut usage = self.usage.lock().expect("usage lock");
        usage.query_count += 1;
        let response: Value = match result {
            Ok(r) => {
                let parsed = r.into_json().map_err(|e| GeneratorError::Transport(e.to_string()));
                usage.wall_time += started.elapsed().as_secs_f64();
                parsed?
            }
            Err(e) => {
                usage.wall_time += started.elapsed().as_secs_f64();
                return Err(GeneratorError::Transport(e.to_string()));
            }
        };
        if let Some(u) = response.get("usage") {
            usage.prompt_tokens += u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0);
            usage.completion_tokens += u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0);
        }
        response
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| GeneratorError::Transport("response has no message content".into()))
    }

    /// Sends the conversation, feeding parse errors back as user turns.
    fn ask<T>(&self, system: &str, user: String, parse: impl Fn(&str) -> Result<T, String>) -> Result<T, GeneratorError> {
        let mut messages = vec![json!({"role": "system", "content": system}), json!({"role": "user", "content": user})];
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            let text = match self.chat(&messages) {
                Ok(t) => t,
                Err(GeneratorError::Transport(e)) if attempt < attempts => {
                    warn!("generator request failed (attempt {attempt}): {e}");
                    last = e;
                    continue;
                }
                Err(e) => return Err(e),
            };
            match parse(&text) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    debug!("unparseable generator answer (attempt {attempt}): {e}");
                    messages.push(json!({"role": "assistant", "content": text}));
                    messages.push(json!({
                        "role": "user",
                        "content": format!("Your answer could not be parsed: {e}. Reply again with the final answer as a ```json block in the required format."),
                    }));
                    last = e;
                }
            }
        }
        Err(GeneratorError::Parse { attempts, message: last })
    }
}

/// Contents of the last ```json fenced block; falls back to the outermost
/// braces when no fence is present.
pub fn extract_json_block(text: &str) -> Option<&str> {
    if let Some(start) = text.rfind("```json") {
        let body = &text[start + "```json".len()..];
        let end = body.find("```").unwrap_or(body.len());
        return Some(body[..end].trim());
    }
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

fn answer_array(text: &str) -> Result<Vec<Value>, String> {
    let block = extract_json_block(text).ok_or("no JSON block found")?;
    let v: Value = serde_json::from_str(block).map_err(|e| format!("invalid JSON: {e}"))?;
    match v.get("answer") {
        Some(Value::Array(a)) => Ok(a.clone()),
        _ => Err("missing `answer` array".into()),
    }
}

#[derive(Deserialize)]
struct GoalEntry {
    objects: Vec<ObjectEntry>,
    probability: f64,
}

#[derive(Deserialize)]
struct ObjectEntry {
    object: String,
    target_area: String,
}

#[derive(Deserialize)]
struct LocationEntry {
    initial_area: String,
    probability: f64,
}

/// Parses the goal prompt's answer format.
pub fn parse_goal_answer(text: &str) -> Result<Vec<RawGoal>, String> {
    answer_array(text)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let e: GoalEntry = serde_json::from_value(v).map_err(|e| format!("answer[{i}]: {e}"))?;
            Ok(RawGoal {
                pairs: e.objects.into_iter().map(|o| (o.object, o.target_area)).collect(),
                probability: e.probability,
            })
        })
        .collect()
}

/// Parses the location prompt's answer format.
pub fn parse_location_answer(text: &str) -> Result<Vec<RawLocation>, String> {
    answer_array(text)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let e: LocationEntry = serde_json::from_value(v).map_err(|e| format!("answer[{i}]: {e}"))?;
            Ok(RawLocation { area: e.initial_area, probability: e.probability })
        })
        .collect()
}

impl HypothesisGenerator for LlmGenerator {
    fn name(&self) -> &str {
        "llm"
    }

    fn propose_goals(&self, q: &GoalQuery<'_>) -> Result<Vec<RawGoal>, GeneratorError> {
        let mut user = format!("The instruction is: {}\n{}\n", q.ctx.instruction, q.observation_text);
        if let Some(h) = &q.ctx.action_observation_history {
            user.push_str(&format!("Action and observation history:\n{h}\n"));
        }
        user.push_str(&format!("k = {}\n", q.k));
        self.ask(GOAL_SYSTEM_PROMPT, user, parse_goal_answer)
    }

    fn propose_locations(&self, q: &LocationQuery<'_>) -> Result<Vec<RawLocation>, GeneratorError> {
        let user = format!(
            "The instruction is: {}\n{}\nThe object of interest is: {}\nk = {}\n",
            q.ctx.instruction, q.observation_text, q.object, q.k
        );
        self.ask(LOCATION_SYSTEM_PROMPT, user, parse_location_answer)
    }

    fn usage(&self) -> GeneratorUsage {
        *self.usage.lock().expect("usage lock")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn takes_last_fenced_block() {
        let text = "reasoning ```json\n{\"answer\": []}\n``` more ```json\n{\"answer\": [{\"initial_area\": \"A\", \"probability\": 1}]}\n```";
        let locs = parse_location_answer(text).unwrap();
        assert_eq!(locs, vec![RawLocation { area: "A".into(), probability: 1.0 }]);
    }

    #[test]
    fn parses_goal_example() {
        let text = r#"```json
{"answer": [{"objects": [{"object": "apple", "target_area": "Human_Hand"}, {"object": "banana", "target_area": "robot"}], "probability": 0.7}]}
```"#;
        let goals = parse_goal_answer(text).unwrap();
        assert_eq!(goals[0].pairs[1], ("banana".to_string(), "robot".to_string()));
        assert_eq!(goals[0].probability, 0.7);
    }

    #[test]
    fn reports_structural_errors() {
        assert!(parse_goal_answer("no json here").is_err());
        assert!(parse_goal_answer("```json\n{\"other\": 1}\n```").unwrap_err().contains("answer"));
        assert!(parse_location_answer("```json\n{\"answer\": [{\"area\": \"x\"}]}\n```").is_err());
    }

    #[test]
    fn prompts_are_embedded() {
        assert!(GOAL_SYSTEM_PROMPT.contains("target_area"));
        assert!(LOCATION_SYSTEM_PROMPT.contains("initial_area"));
    }

    #[test]
    fn missing_key_is_config_error() {
        let cfg = LlmConfig { api_key_env: "REARRANGE_TEST_UNSET_KEY_VAR".into(), ..Default::default() };
        assert!(matches!(LlmGenerator::from_env(cfg), Err(GeneratorError::Config(_))));
    }
}
