//! Environments and the environment wire protocol.
//!
//! [`GridHouse`] is a small deterministic text world with the same tool
//! surface as the household and science simulators agents are usually
//! trained on: free-form actions, admissible-command listing, a task
//! objective, and sub-goal rewards. [`CounterEnv`] is a trivial counter used
//! for isolation checks and protocol conformance.

mod counter;
pub mod gridhouse;

#[cfg(feature = "runtime")]
pub mod conformance;
#[cfg(feature = "runtime")]
pub mod http;
#[cfg(feature = "runtime")]
pub mod sandbox;

pub use counter::CounterEnv;
pub use gridhouse::{GridHouse, GridHouseFixtures};

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Observation returned for any action text the environment cannot parse.
pub const INVALID_ACTION: &str = "No known action matches that input.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvStepResult {
    pub observation: String,
    pub reward: f64,
    pub done: bool,
    #[serde(default)]
    pub info: BTreeMap<String, Value>,
}

impl EnvStepResult {
    /// Builds a result whose `info` echoes the reward.
    pub fn new(observation: impl Into<String>, reward: f64, done: bool) -> Self {
        let mut info = BTreeMap::new();
        info.insert("reward".to_string(), Value::from(reward));
        Self {
            observation: observation.into(),
            reward,
            done,
            info,
        }
    }
}

/// Body of a reset request; any field may select the episode. `target` is
/// only meaningful to the counter environment.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResetRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<i64>,
}

impl ResetRequest {
    pub fn task(task_id: impl Into<String>) -> Self {
        Self {
            task_id: Some(task_id.into()),
            ..Self::default()
        }
    }

    pub fn seed(seed: u64) -> Self {
        Self {
            seed: Some(seed),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("environment has not been reset")]
    NotReset,
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("{0} is not supported by this environment")]
    Unsupported(&'static str),
    #[error("environment timed out after {0:?}")]
    Timeout(Duration),
    #[error("environment backend failure: {0}")]
    Backend(String),
    #[error("server returned {status}: {message}")]
    Http { status: u16, message: String },
    #[error("network error: {0}")]
    Network(String),
    #[error("invalid fixtures: {0}")]
    Fixture(String),
}

#[cfg(feature = "runtime")]
pub use runtime::{EnvFactory, Environment};

#[cfg(feature = "runtime")]
mod runtime {
    use std::sync::Arc;

    use async_trait::async_trait;

    use super::{CounterEnv, EnvError, EnvStepResult, GridHouse, ResetRequest};

    /// A single environment instance. Instances are driven by one caller at a
    /// time; concurrency comes from pooling many instances.
    #[async_trait]
    pub trait Environment: Send {
        async fn reset(&mut self, request: &ResetRequest) -> Result<String, EnvError>;

        async fn step(&mut self, action: &str) -> Result<EnvStepResult, EnvError>;

        async fn admissible_commands(&mut self) -> Result<Vec<String>, EnvError> {
            Err(EnvError::Unsupported("admissible_commands"))
        }

        async fn task_objective(&mut self) -> Result<String, EnvError> {
            Err(EnvError::Unsupported("task_objective"))
        }
    }

    /// Builds the backend for pool slot `index`.
    pub type EnvFactory = Arc<dyn Fn(usize) -> Result<Box<dyn Environment>, EnvError> + Send + Sync>;

    #[async_trait]
    impl Environment for GridHouse {
        async fn reset(&mut self, request: &ResetRequest) -> Result<String, EnvError> {
            GridHouse::reset(self, request)
        }

        async fn step(&mut self, action: &str) -> Result<EnvStepResult, EnvError> {
            GridHouse::step(self, action)
        }

        async fn admissible_commands(&mut self) -> Result<Vec<String>, EnvError> {
            GridHouse::admissible_commands(self)
        }

        async fn task_objective(&mut self) -> Result<String, EnvError> {
            GridHouse::task_objective(self)
        }
    }

    #[async_trait]
    impl Environment for CounterEnv {
        async fn reset(&mut self, request: &ResetRequest) -> Result<String, EnvError> {
            CounterEnv::reset(self, request)
        }

        async fn step(&mut self, action: &str) -> Result<EnvStepResult, EnvError> {
            CounterEnv::step(self, action)
        }

        async fn admissible_commands(&mut self) -> Result<Vec<String>, EnvError> {
            CounterEnv::admissible_commands(self)
        }

        async fn task_objective(&mut self) -> Result<String, EnvError> {
            CounterEnv::task_objective(self)
        }
    }
}
