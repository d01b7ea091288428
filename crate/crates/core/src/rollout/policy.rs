//! Policies: what produces each assistant turn.

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::parse::StructuredCall;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<StructuredCall>,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_calls: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRequest {
    pub chain_id: String,
    pub group: usize,
    pub turn: u32,
    pub messages: Vec<ChatMessage>,
    pub tools: Vec<Value>,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Generation {
    pub text: String,
    pub tool_calls: Vec<StructuredCall>,
    pub logprobs: Option<Vec<f64>>,
}

impl Generation {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("policy request failed: {0}")]
    Request(String),
    #[error("policy endpoint returned {status}: {message}")]
    Status { status: u16, message: String },
    #[error("malformed policy response: {0}")]
    Protocol(String),
}

#[async_trait]
pub trait Policy: Send + Sync {
    async fn generate(&self, request: &GenerateRequest) -> Result<Generation, PolicyError>;
}

type ScriptFn = dyn Fn(&GenerateRequest) -> Result<Generation, PolicyError> + Send + Sync;

/// Replays fixed turns. A chain's turn `t` gets entry `t` of its group's
/// script; past the end the last entry repeats.
#[derive(Clone)]
pub struct ScriptedPolicy {
    script: Arc<ScriptFn>,
    latency: Duration,
}

impl fmt::Debug for ScriptedPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptedPolicy")
            .field("latency", &self.latency)
            .finish_non_exhaustive()
    }
}

impl ScriptedPolicy {
    pub fn new<S: Into<String>>(turns: Vec<S>) -> Self {
        Self::per_group(vec![turns])
    }

    /// One script per query group; groups beyond the list reuse the last.
    pub fn per_group<S: Into<String>>(scripts: Vec<Vec<S>>) -> Self {
        let scripts: Vec<Vec<String>> = scripts
            .into_iter()
            .map(|s| s.into_iter().map(Into::into).collect())
            .collect();
        Self::from_fn(move |req| {
            let script = scripts
                .get(req.group)
                .or_else(|| scripts.last())
                .filter(|s| !s.is_empty())
                .ok_or_else(|| PolicyError::Protocol("empty script".into()))?;
            let t = (req.turn as usize).min(script.len() - 1);
            Ok(Generation::text(script[t].clone()))
        })
    }

    pub fn from_fn(
        f: impl Fn(&GenerateRequest) -> Result<Generation, PolicyError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            script: Arc::new(f),
            latency: Duration::ZERO,
        }
    }

    /// Simulated generation latency per call.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }
}

#[async_trait]
impl Policy for ScriptedPolicy {
    async fn generate(&self, request: &GenerateRequest) -> Result<Generation, PolicyError> {
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        (self.script)(request)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// A seeded, transcript-driven GridHouse agent. It reads the objective and
/// the admissible commands, then steps with actions drawn from the latest
/// list (favouring goal objects, unexplored places and open doors) and
/// answers once something was moved. Its choices depend only on the seed, the chain ID, the turn
/// and the transcript.
#[derive(Debug, Clone)]
pub struct ExplorerPolicy {
    pub seed: u64,
    pub greed: f64,
    pub latency: Duration,
}

impl ExplorerPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            greed: 0.6,
            latency: Duration::ZERO,
        }
    }

    fn rng(&self, req: &GenerateRequest) -> StdRng {
        let mut key = self.seed.to_le_bytes().to_vec();
        key.extend_from_slice(req.chain_id.as_bytes());
        key.extend_from_slice(&req.turn.to_le_bytes());
        StdRng::seed_from_u64(fnv1a(&key))
    }

    fn decide(&self, req: &GenerateRequest) -> String {
        let tool_msgs: Vec<&str> = req
            .messages
            .iter()
            .filter(|m| m.role == Role::Tool)
            .map(|m| m.content.as_str())
            .collect();
        let step = |a: &str| {
            format!(
                "Action: gridhouse_step\nInput: {}\nAction: gridhouse_get_admissible_commands",
                json!({ "action": a })
            )
        };
        if tool_msgs.is_empty() {
            return "Thought: First, I need the task objective and what I can do here.\n\
                    Action: gridhouse_get_task_objective\n\
                    Action: gridhouse_get_admissible_commands"
                .into();
        }
        let last = tool_msgs[tool_msgs.len() - 1];
        let moved = last
            .split("\n\n")
            .next()
            .is_some_and(|first| first.starts_with("You move the "));
        if moved {
            return "Answer: I placed the object where the task asked.".into();
        }
        let goal_words: Vec<&str> = tool_msgs[0]
            .split("\n\n")
            .next()
            .unwrap_or_default()
            .trim_start_matches("Task:")
            .split_whitespace()
            .filter(|w| w.len() > 2 && !matches!(*w, "put" | "the" | "move" | "and" | "into"))
            .collect();
        let hits = |text: &str| text.split_whitespace().filter(|w| goal_words.contains(w)).count();
        let history: Vec<&str> = tool_msgs.iter().filter_map(|m| m.split("\n\n").next()).collect();
        let visited = |place: &str| {
            history.iter().any(|h| {
                h.starts_with(&format!("You arrive at {place}."))
                    || h.starts_with(&format!("You move to the {place}."))
            })
        };
        let holding_goal = history
            .iter()
            .rev()
            .find_map(|h| {
                let obj = h.strip_prefix("You pick up the ")?;
                Some(hits(obj.split(" from ").next().unwrap_or_default()) > 0)
            })
            .unwrap_or(false);
        let commands: Vec<&str> = last
            .rsplit("\n\n")
            .next()
            .unwrap_or_default()
            .lines()
            .filter(|c| !matches!(*c, "look around" | "inventory" | "task"))
            .collect();
        if commands.is_empty() {
            return step("look around");
        }
        // Higher is better: finish a goal move, take goal objects, open
        // doors, visit unexplored places, head for the goal once holding.
        let score = |c: &str| -> i32 {
            if let Some(rest) = c.strip_prefix("move ") {
                let (obj, dest) = rest.split_once(" to ").unwrap_or((rest, ""));
                return if hits(obj) > 0 && hits(dest) > 0 { 6 } else { -1 };
            }
            if let Some(rest) = c.strip_prefix("take ") {
                let obj = rest.split(" from ").next().unwrap_or(rest);
                return if !holding_goal && hits(obj) > 0 { 5 } else { -1 };
            }
            if c.starts_with("open ") {
                return 2;
            }
            if let Some(place) = c.strip_prefix("go to ") {
                let toward = i32::from(holding_goal && hits(place) > 0) * 3;
                let fresh = i32::from(!visited(place)) * 2;
                return toward + fresh;
            }
            0
        };
        let mut rng = self.rng(req);
        let best_score = commands.iter().map(|c| score(c)).max().unwrap_or(0);
        let best: Vec<&str> = commands
            .iter()
            .copied()
            .filter(|c| score(c) == best_score)
            .collect();
        let pick = if best_score > 0 && rng.random_bool(self.greed) {
            best[rng.random_range(0..best.len())]
        } else {
            commands[rng.random_range(0..commands.len())]
        };
        format!("Thought: I will try '{pick}'.\n{}", step(pick))
    }
}

#[async_trait]
impl Policy for ExplorerPolicy {
    async fn generate(&self, request: &GenerateRequest) -> Result<Generation, PolicyError> {
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        Ok(Generation::text(self.decide(request)))
    }
}

/// Client for an OpenAI-compatible chat-completions endpoint.
#[derive(Debug, Clone)]
pub struct RemotePolicy {
    endpoint: String,
    model: String,
    client: reqwest::Client,
    pub logprobs: bool,
    pub temperature: Option<f64>,
}

impl RemotePolicy {
    /// `endpoint` is the API base, e.g. `http://localhost:8000/v1`.
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Result<Self, PolicyError> {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| PolicyError::Request(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            model: model.into(),
            client,
            logprobs: false,
            temperature: None,
        })
    }

    pub fn request_body(&self, request: &GenerateRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let mut v = json!({ "role": m.role, "content": m.content });
                if !m.tool_calls.is_empty() {
                    v["tool_calls"] = m
                        .tool_calls
                        .iter()
                        .map(|c| {
                            json!({
                                "id": c.id,
                                "type": "function",
                                "function": { "name": c.name, "arguments": c.arguments },
                            })
                        })
                        .collect();
                }
                v
            })
            .collect();
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "max_tokens": request.max_new_tokens,
        });
        if !request.tools.is_empty() {
            body["tools"] = Value::Array(request.tools.clone());
        }
        if self.logprobs {
            body["logprobs"] = Value::Bool(true);
        }
        if let Some(t) = self.temperature {
            body["temperature"] = json!(t);
        }
        body
    }
}

/// Reads the first choice of a chat-completions response.
pub fn parse_completion(body: &Value) -> Result<Generation, PolicyError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| PolicyError::Protocol("no choices".into()))?;
    let message = choice
        .get("message")
        .ok_or_else(|| PolicyError::Protocol("choice has no message".into()))?;
    let text = message
        .get("content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let tool_calls = message
        .get("tool_calls")
        .and_then(Value::as_array)
        .map(|calls| {
            calls
                .iter()
                .map(|c| {
                    let f = &c["function"];
                    let arguments = match &f["arguments"] {
                        Value::String(s) => s.clone(),
                        Value::Null => String::new(),
                        other => other.to_string(),
                    };
                    StructuredCall {
                        id: c["id"].as_str().unwrap_or_default().to_string(),
                        name: f["name"].as_str().unwrap_or_default().to_string(),
                        arguments,
                    }
                })
                .collect()
        })
        .unwrap_or_default();
    let logprobs = choice
        .get("logprobs")
        .and_then(|l| l.get("content"))
        .and_then(Value::as_array)
        .map(|toks| toks.iter().filter_map(|t| t["logprob"].as_f64()).collect());
    Ok(Generation {
        text,
        tool_calls,
        logprobs,
    })
}

#[async_trait]
impl Policy for RemotePolicy {
    async fn generate(&self, request: &GenerateRequest) -> Result<Generation, PolicyError> {
        let resp = self
            .client
            .post(format!("{}/chat/completions", self.endpoint))
            .json(&self.request_body(request))
            .send()
            .await
            .map_err(|e| PolicyError::Request(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .await
            .map_err(|e| PolicyError::Request(e.to_string()))?;
        if !status.is_success() {
            return Err(PolicyError::Status {
                status: status.as_u16(),
                message: text,
            });
        }
        let body: Value = serde_json::from_str(&text).map_err(|e| PolicyError::Protocol(e.to_string()))?;
        parse_completion(&body)
    }
}
