//! Reward functions: pure scoring helpers and, with the `runtime` feature,
//! a registry whose entries may be bound to an environment pool.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::envs::EnvError;
use crate::trajectory::Trajectory;

pub const DEFAULT_ANSWER_MARKER: &str = "Answer:";
const NUMERIC_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("reward {0:?} is already registered")]
    DuplicateReward(String),
    #[error("unknown reward {0:?}")]
    UnknownReward(String),
    #[error("reward configuration error: {0}")]
    ConfigError(String),
    #[error("reward map has no \"reward\" key")]
    MissingRewardKey,
    #[error("reward value {0} is not finite")]
    NonFinite(f64),
    #[error("reward stream is empty")]
    EmptyTrajectory,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("reward evaluation timed out")]
    Timeout,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardResult {
    pub reward: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extras: BTreeMap<String, f64>,
}

impl RewardResult {
    pub fn scalar(reward: f64) -> Self {
        Self {
            reward,
            extras: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.extras.insert(key.to_string(), value);
        self
    }
}

/// What a reward function may return: a bare scalar or a map that must
/// contain `"reward"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RewardValue {
    Scalar(f64),
    Map(BTreeMap<String, f64>),
}

impl From<f64> for RewardValue {
    fn from(v: f64) -> Self {
        RewardValue::Scalar(v)
    }
}

impl From<RewardResult> for RewardValue {
    fn from(r: RewardResult) -> Self {
        let mut m = r.extras;
        m.insert("reward".into(), r.reward);
        RewardValue::Map(m)
    }
}

impl RewardValue {
    pub fn normalize(self) -> Result<RewardResult, RewardError> {
        let result = match self {
            RewardValue::Scalar(v) => RewardResult::scalar(v),
            RewardValue::Map(mut m) => {
                let reward = m.remove("reward").ok_or(RewardError::MissingRewardKey)?;
                RewardResult { reward, extras: m }
            }
        };
        if !result.reward.is_finite() {
            return Err(RewardError::NonFinite(result.reward));
        }
        Ok(result)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardInputKind {
    Prediction,
    Answer,
    Trajectory,
    ChainId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub name: String,
    #[serde(default)]
    pub env_pool: Option<String>,
    #[serde(default)]
    pub pool_size: Option<usize>,
    pub inputs: Vec<RewardInputKind>,
}

impl RewardSpec {
    pub fn new(name: impl Into<String>, inputs: &[RewardInputKind]) -> Self {
        Self {
            name: name.into(),
            env_pool: None,
            pool_size: None,
            inputs: inputs.to_vec(),
        }
    }

    pub fn with_env(mut self, pool: impl Into<String>, pool_size: usize) -> Self {
        self.env_pool = Some(pool.into());
        self.pool_size = Some(pool_size);
        self
    }

    pub fn declares(&self, kind: RewardInputKind) -> bool {
        self.inputs.contains(&kind)
    }
}

/// Everything a reward could be given. The registry passes a copy holding
/// only the inputs the reward declares.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewardInput {
    pub prediction: Option<String>,
    pub answer: Option<String>,
    pub trajectory: Option<Trajectory>,
    pub chain_id: Option<String>,
}

impl RewardInput {
    pub fn restrict(&self, spec: &RewardSpec) -> RewardInput {
        let keep = |k| spec.declares(k);
        RewardInput {
            prediction: self
                .prediction
                .clone()
                .filter(|_| keep(RewardInputKind::Prediction)),
            answer: self.answer.clone().filter(|_| keep(RewardInputKind::Answer)),
            trajectory: self
                .trajectory
                .clone()
                .filter(|_| keep(RewardInputKind::Trajectory)),
            chain_id: self.chain_id.clone().filter(|_| keep(RewardInputKind::ChainId)),
        }
    }
}

fn qa_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Bag-of-words F1 over lowercase whitespace tokens, and exact match after
/// trimming and lowercasing. `reward` is the F1.
pub fn qa_f1(prediction: &str, answer: &str) -> RewardResult {
    let pred = qa_tokens(prediction);
    let gold = qa_tokens(answer);
    let mut counts: BTreeMap<&str, isize> = BTreeMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    let f1 = if common == 0 {
        0.0
    } else {
        let p = common as f64 / pred.len() as f64;
        let r = common as f64 / gold.len() as f64;
        2.0 * p * r / (p + r)
    };
    let em = f64::from(prediction.trim().to_lowercase() == answer.trim().to_lowercase());
    RewardResult::scalar(f1).with("f1", f1).with("em", em)
}

/// Text after the last `marker` in `response`, or the whole response when
/// the marker is absent.
pub fn extract_answer(response: &str, marker: &str) -> String {
    match response.rfind(marker) {
        Some(i) if !marker.is_empty() => response[i + marker.len()..].trim().to_string(),
        _ => response.trim().to_string(),
    }
}

fn canonical(text: &str) -> String {
    text.trim()
        .trim_end_matches('.')
        .trim()
        .trim_start_matches('$')
        .replace(',', "")
        .to_lowercase()
}

/// Numeric equality within 1e-6 when both sides parse as numbers, string
/// equality of the canonical forms otherwise.
pub fn answers_match(prediction: &str, gold: &str) -> bool {
    let (p, g) = (canonical(prediction), canonical(gold));
    match (p.parse::<f64>(), g.parse::<f64>()) {
        (Ok(a), Ok(b)) => (a - b).abs() <= NUMERIC_TOLERANCE,
        _ => !p.is_empty() && p == g,
    }
}

/// 0.0 without a valid tool call, 0.1 with one but a wrong final answer,
/// 1.0 with one and a correct final answer.
pub fn code_math_reward(trajectory: &Trajectory, answer: &str, marker: &str) -> RewardResult {
    let valid_calls = trajectory.tool_calls.iter().filter(|c| c.valid).count();
    let text = trajectory
        .final_response()
        .map(|s| s.text.as_str())
        .unwrap_or_default();
    let correct = if marker.is_empty() || !text.contains(marker) {
        // No marker: accept the whole response or its last numeric token.
        answers_match(text, answer)
            || text
                .split_whitespace()
                .rev()
                .find(|w| canonical(w).parse::<f64>().is_ok())
                .is_some_and(|w| answers_match(w, answer))
    } else {
        answers_match(&extract_answer(text, marker), answer)
    };
    let reward = match (valid_calls > 0, correct) {
        (false, _) => 0.0,
        (true, false) => 0.1,
        (true, true) => 1.0,
    };
    RewardResult::scalar(reward)
        .with("valid_tool_calls", valid_calls as f64)
        .with("answer_correct", f64::from(correct))
}

/// Highest reward reached at any point of a per-step reward stream.
pub fn max_over_trajectory_reward(stream: &[f64]) -> Result<f64, RewardError> {
    let mut it = stream.iter().copied();
    let first = it.next().ok_or(RewardError::EmptyTrajectory)?;
    let best = it.fold(first, f64::max);
    if best.is_finite() {
        Ok(best)
    } else {
        Err(RewardError::NonFinite(best))
    }
}

#[cfg(feature = "runtime")]
pub use runtime::*;

#[cfg(feature = "runtime")]
mod runtime {
    use std::collections::BTreeMap;
    use std::fmt;
    use std::sync::Arc;
    use std::time::Duration;

    use async_trait::async_trait;

    use super::*;
    use crate::envpool::{PoolConfig, PoolError, PoolManager};
    use crate::envs::{EnvFactory, Environment, ResetRequest};
    use crate::tools::builtin::{COUNTER_POOL, GRIDHOUSE_POOL};

    #[async_trait]
    pub trait RewardFunction: Send + Sync {
        /// `env` is the chain's leased instance for env-bound rewards.
        async fn evaluate(
            &self,
            input: RewardInput,
            env: Option<&mut dyn Environment>,
        ) -> Result<RewardValue, RewardError>;
    }

    /// A reward from a synchronous function of its inputs.
    pub struct FnReward<F>(pub F);

    #[async_trait]
    impl<F> RewardFunction for FnReward<F>
    where
        F: Fn(&RewardInput) -> Result<RewardValue, RewardError> + Send + Sync,
    {
        async fn evaluate(
            &self,
            input: RewardInput,
            _env: Option<&mut dyn Environment>,
        ) -> Result<RewardValue, RewardError> {
            (self.0)(&input)
        }
    }

    /// Where and how a chain's reward is evaluated.
    #[derive(Debug, Clone, Default)]
    pub struct RewardContext {
        pub input: RewardInput,
        pub chain_id: String,
        /// Episode to start if the chain never touched the reward's pool.
        pub episode: Option<ResetRequest>,
    }

    #[derive(Clone)]
    struct Entry {
        spec: RewardSpec,
        f: Arc<dyn RewardFunction>,
    }

    #[derive(Clone)]
    pub struct RewardRegistry {
        rewards: BTreeMap<String, Entry>,
        pools: Arc<PoolManager>,
    }

    impl fmt::Debug for RewardRegistry {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.debug_struct("RewardRegistry")
                .field("rewards", &self.names())
                .finish()
        }
    }

    impl RewardRegistry {
        pub fn new(pools: Arc<PoolManager>) -> Self {
            Self {
                rewards: BTreeMap::new(),
                pools,
            }
        }

        pub fn register(
            &mut self,
            spec: RewardSpec,
            f: impl RewardFunction + 'static,
            factory: Option<EnvFactory>,
        ) -> Result<(), RewardError> {
            if self.rewards.contains_key(&spec.name) {
                return Err(RewardError::DuplicateReward(spec.name));
            }
            if let Some(pool) = &spec.env_pool {
                if !self.pools.contains(pool) {
                    let factory = factory.ok_or_else(|| {
                        RewardError::ConfigError(format!(
                            "reward {:?}: pool {pool:?} does not exist and no factory was given",
                            spec.name
                        ))
                    })?;
                    let config = PoolConfig::with_capacity(spec.pool_size.unwrap_or(1));
                    self.pools
                        .create_pool(pool, config, factory)
                        .map_err(|e| RewardError::ConfigError(e.to_string()))?;
                }
            }
            self.rewards
                .insert(spec.name.clone(), Entry { spec, f: Arc::new(f) });
            Ok(())
        }

        pub fn spec(&self, name: &str) -> Option<&RewardSpec> {
            self.rewards.get(name).map(|e| &e.spec)
        }

        pub fn names(&self) -> Vec<String> {
            self.rewards.keys().cloned().collect()
        }

        pub fn contains(&self, name: &str) -> bool {
            self.rewards.contains_key(name)
        }

        /// Evaluates `name` for one chain. Env-bound rewards run on the
        /// chain's own leased instance, so call this before releasing the
        /// chain's leases.
        pub async fn evaluate(
            &self,
            name: &str,
            ctx: &RewardContext,
            timeout: Duration,
        ) -> Result<RewardResult, RewardError> {
            let entry = self
                .rewards
                .get(name)
                .ok_or_else(|| RewardError::UnknownReward(name.to_string()))?;
            let input = ctx.input.restrict(&entry.spec);
            let run = async {
                match &entry.spec.env_pool {
                    None => entry.f.evaluate(input, None).await,
                    Some(pool) => {
                        let lease = self
                            .pools
                            .acquire(pool, &ctx.chain_id)
                            .await
                            .map_err(pool_error)?;
                        let mut guard = lease
                            .lock_started(ctx.episode.as_ref())
                            .await
                            .map_err(pool_error)?;
                        entry.f.evaluate(input, Some(guard.env.as_mut())).await
                    }
                }
            };
            tokio::time::timeout(timeout, run)
                .await
                .map_err(|_| RewardError::Timeout)??
                .normalize()
        }
    }

    fn pool_error(e: PoolError) -> RewardError {
        match e {
            PoolError::Backend(env) => RewardError::Env(env),
            PoolError::Timeout { .. } => RewardError::Timeout,
            other => RewardError::Env(EnvError::Backend(other.to_string())),
        }
    }

    pub struct QaF1Reward;

    #[async_trait]
    impl RewardFunction for QaF1Reward {
        async fn evaluate(
            &self,
            input: RewardInput,
            _env: Option<&mut dyn Environment>,
        ) -> Result<RewardValue, RewardError> {
            let p = input.prediction.unwrap_or_default();
            let a = input.answer.unwrap_or_default();
            Ok(qa_f1(&p, &a).into())
        }
    }

    pub struct CodeMathReward {
        pub marker: String,
    }

    impl Default for CodeMathReward {
        fn default() -> Self {
            Self {
                marker: DEFAULT_ANSWER_MARKER.to_string(),
            }
        }
    }

    #[async_trait]
    impl RewardFunction for CodeMathReward {
        async fn evaluate(
            &self,
            input: RewardInput,
            _env: Option<&mut dyn Environment>,
        ) -> Result<RewardValue, RewardError> {
            let a = input.answer.unwrap_or_default();
            let r = match &input.trajectory {
                Some(t) => code_math_reward(t, &a, &self.marker),
                None => RewardResult::scalar(0.0),
            };
            Ok(r.into())
        }
    }

    /// Polls the environment with the empty action. `sparse` gives 1.0 on
    /// completion and 0.0 otherwise; otherwise the environment's own reward
    /// is returned.
    pub struct PollReward {
        pub sparse: bool,
    }

    #[async_trait]
    impl RewardFunction for PollReward {
        async fn evaluate(
            &self,
            _input: RewardInput,
            env: Option<&mut dyn Environment>,
        ) -> Result<RewardValue, RewardError> {
            let env = env.ok_or_else(|| RewardError::ConfigError("reward needs an environment".into()))?;
            let r = env.step("").await?;
            let reward = if self.sparse { f64::from(r.done) } else { r.reward };
            Ok(RewardResult::scalar(reward)
                .with("progress", r.reward)
                .with("done", f64::from(r.done))
                .into())
        }
    }

    pub fn register_qa_f1(reg: &mut RewardRegistry) -> Result<(), RewardError> {
        reg.register(
            RewardSpec::new(
                "qa_f1_reward",
                &[RewardInputKind::Prediction, RewardInputKind::Answer],
            ),
            QaF1Reward,
            None,
        )
    }

    pub fn register_code_math(reg: &mut RewardRegistry, marker: &str) -> Result<(), RewardError> {
        reg.register(
            RewardSpec::new(
                "code_math_reward",
                &[RewardInputKind::Trajectory, RewardInputKind::Answer],
            ),
            CodeMathReward {
                marker: marker.to_string(),
            },
            None,
        )
    }

    /// Sparse outcome reward on the GridHouse pool: 1.0 for success, 0.0
    /// otherwise, with sub-goal progress in the extras.
    pub fn register_gridhouse(
        reg: &mut RewardRegistry,
        factory: Option<EnvFactory>,
        pool_size: usize,
    ) -> Result<(), RewardError> {
        reg.register(
            RewardSpec::new("gridhouse_reward", &[]).with_env(GRIDHOUSE_POOL, pool_size),
            PollReward { sparse: true },
            factory,
        )
    }

    pub fn register_counter(
        reg: &mut RewardRegistry,
        factory: Option<EnvFactory>,
        pool_size: usize,
    ) -> Result<(), RewardError> {
        reg.register(
            RewardSpec::new("counter_reward", &[]).with_env(COUNTER_POOL, pool_size),
            PollReward { sparse: false },
            factory,
        )
    }

}
