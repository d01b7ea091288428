//! Tool specifications, argument validation and the built-in tools.
//!
//! Every external interface an agent touches is a tool. Non-stateful tools
//! run immediately; stateful tools are bound to a pooled environment
//! instance through the chain ID (see [`registry`]).

pub mod calculator;
mod lookup;
#[cfg(feature = "runtime")]
pub mod registry;

pub use lookup::LookupTable;
#[cfg(feature = "runtime")]
pub use registry::{
    builtin, BlockingFnTool, FnTool, StatefulTool, StatelessTool, ToolCall, ToolFailure, ToolRegistry,
    ToolResult,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

pub const DEFAULT_MAX_OBSERVATION_CHARS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolErrorKind {
    UnknownTool,
    BadArgs,
    EnvError,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToolError {
    #[error("tool {0:?} is already registered")]
    DuplicateTool(String),
    #[error("unknown tool {0:?}")]
    UnknownTool(String),
    #[error("tool configuration error: {0}")]
    ConfigError(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamType {
    String,
    Integer,
    Number,
    Boolean,
    Object,
    Array,
}

impl ParamType {
    fn accepts(self, v: &Value) -> bool {
        match self {
            ParamType::String => v.is_string(),
            ParamType::Integer => v.is_i64() || v.is_u64(),
            ParamType::Number => v.is_number(),
            ParamType::Boolean => v.is_boolean(),
            ParamType::Object => v.is_object(),
            ParamType::Array => v.is_array(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            ParamType::String => "string",
            ParamType::Integer => "integer",
            ParamType::Number => "number",
            ParamType::Boolean => "boolean",
            ParamType::Object => "object",
            ParamType::Array => "array",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    #[serde(rename = "type")]
    pub ty: ParamType,
    pub description: String,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub parameters: BTreeMap<String, ParamSpec>,
    pub stateful: bool,
    pub env_pool: Option<String>,
    pub pool_size: Option<usize>,
    pub max_observation_chars: usize,
}

impl ToolSpec {
    pub fn stateless(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            parameters: BTreeMap::new(),
            stateful: false,
            env_pool: None,
            pool_size: None,
            max_observation_chars: DEFAULT_MAX_OBSERVATION_CHARS,
        }
    }

    pub fn stateful(
        name: impl Into<String>,
        description: impl Into<String>,
        env_pool: impl Into<String>,
        pool_size: usize,
    ) -> Self {
        Self {
            stateful: true,
            env_pool: Some(env_pool.into()),
            pool_size: Some(pool_size),
            ..Self::stateless(name, description)
        }
    }

    pub fn param(
        mut self,
        name: impl Into<String>,
        ty: ParamType,
        description: impl Into<String>,
        required: bool,
    ) -> Self {
        self.parameters.insert(
            name.into(),
            ParamSpec {
                ty,
                description: description.into(),
                required,
            },
        );
        self
    }

    pub fn max_observation_chars(mut self, limit: usize) -> Self {
        self.max_observation_chars = limit;
        self
    }

    pub fn check(&self) -> Result<(), ToolError> {
        if self.name.trim().is_empty() {
            return Err(ToolError::ConfigError("tool name is empty".into()));
        }
        if self.stateful != self.env_pool.is_some() {
            return Err(ToolError::ConfigError(format!(
                "tool {:?}: stateful tools need an environment pool and only they may have one",
                self.name
            )));
        }
        if self.stateful && self.pool_size == Some(0) {
            return Err(ToolError::ConfigError(format!(
                "tool {:?}: pool_size must be positive",
                self.name
            )));
        }
        if self.max_observation_chars == 0 {
            return Err(ToolError::ConfigError(format!(
                "tool {:?}: max_observation_chars must be positive",
                self.name
            )));
        }
        Ok(())
    }

    /// Function-calling schema record:
    /// `{"type":"function","function":{"name","description","parameters"}}`.
    pub fn schema(&self) -> Value {
        let mut properties = Map::new();
        let mut required = Vec::new();
        for (name, p) in &self.parameters {
            properties.insert(
                name.clone(),
                json!({ "type": p.ty.name(), "description": p.description }),
            );
            if p.required {
                required.push(Value::String(name.clone()));
            }
        }
        json!({
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": {
                    "type": "object",
                    "properties": properties,
                    "required": required,
                }
            }
        })
    }

    /// Strict validation: `args` must be an object, every required parameter
    /// present, no unknown parameters, and every value of the declared type.
    /// The error text is meant to be shown to the model.
    pub fn validate_args<'a>(&self, args: &'a Value) -> Result<&'a Map<String, Value>, String> {
        let Some(obj) = args.as_object() else {
            return Err(format!(
                "Error: arguments for '{}' must be a JSON object, got {}",
                self.name, args
            ));
        };
        for (name, p) in &self.parameters {
            match obj.get(name) {
                None if p.required => {
                    return Err(format!(
                        "Error: missing required parameter '{name}' for tool '{}'",
                        self.name
                    ))
                }
                Some(v) if !p.ty.accepts(v) => {
                    return Err(format!(
                        "Error: parameter '{name}' of tool '{}' must be of type {}, got {v}",
                        self.name,
                        p.ty.name()
                    ))
                }
                _ => {}
            }
        }
        if let Some(extra) = obj.keys().find(|k| !self.parameters.contains_key(*k)) {
            return Err(format!(
                "Error: unknown parameter '{extra}' for tool '{}'",
                self.name
            ));
        }
        Ok(obj)
    }
}

/// Cuts `text` to `limit` characters and appends a marker naming how many
/// characters were dropped.
pub fn truncate_observation(text: String, limit: usize) -> String {
    let total = text.chars().count();
    if total <= limit {
        return text;
    }
    let cut: String = text.chars().take(limit).collect();
    format!("{cut}\n...[truncated {} chars]", total - limit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn calc() -> ToolSpec {
        ToolSpec::stateless("calculator", "Calculate the result of a mathematical expression.").param(
            "expression",
            ParamType::String,
            "A mathematical expression.",
            true,
        )
    }

    #[test]
    fn schema_record_shape() {
        let s = calc().schema();
        assert_eq!(s["type"], "function");
        assert_eq!(s["function"]["name"], "calculator");
        assert_eq!(
            s["function"]["parameters"]["properties"]["expression"]["type"],
            "string"
        );
        assert_eq!(s["function"]["parameters"]["required"], json!(["expression"]));
    }

    #[test]
    fn strict_validation() {
        let spec = calc();
        assert!(spec.validate_args(&json!({"expression": "1+1"})).is_ok());
        assert!(spec.validate_args(&json!({})).unwrap_err().contains("missing"));
        assert!(spec
            .validate_args(&json!({"expression": 3}))
            .unwrap_err()
            .contains("type string"));
        assert!(spec
            .validate_args(&json!({"expression": "1", "x": 1}))
            .unwrap_err()
            .contains("unknown parameter"));
        assert!(spec.validate_args(&json!("1+1")).is_err());
    }

    #[test]
    fn statefulness_requires_pool() {
        assert!(calc().check().is_ok());
        let mut bad = calc();
        bad.stateful = true;
        assert!(matches!(bad.check(), Err(ToolError::ConfigError(_))));
        assert!(ToolSpec::stateful("ci", "code", "python", 8).check().is_ok());
        assert!(ToolSpec::stateful("ci", "code", "python", 0).check().is_err());
    }

    #[test]
    fn truncation_marker() {
        assert_eq!(truncate_observation("abc".into(), 3), "abc");
        assert_eq!(
            truncate_observation("abcdef".into(), 2),
            "ab\n...[truncated 4 chars]"
        );
    }
}
