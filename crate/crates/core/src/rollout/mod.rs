//! Chain-based rollout.
//!
//! Every query is expanded into `n_chains_per_query` chains. Each chain runs
//! as its own task: generate, parse tool calls, invoke them in order, append
//! the observations, repeat, until the model answers or `max_turns`
//! responses exist. The reward is evaluated after the chain ends and before
//! its environment leases are released. Chains only share the pools and the
//! generation limiter, so slow chains never hold up fast ones.

pub mod parse;
pub mod stats;

#[cfg(feature = "runtime")]
pub mod policy;

pub use parse::{parse_actions, ParsedCall, ParsedResponse, StructuredCall};
pub use stats::{chain_stats, curve_rows, split_batches, ChainStats, CurveRow, StatsError};

#[cfg(feature = "runtime")]
pub use engine::*;

#[cfg(feature = "runtime")]
mod engine {
    use std::sync::Arc;
    use std::time::Duration;

    use serde::{Deserialize, Serialize};
    use serde_json::Value;
    use tokio::sync::Semaphore;
    use tokio::task::JoinSet;

    use super::parse::{parse_actions, render_calls};
    use super::policy::{ChatMessage, GenerateRequest, Policy, Role};
    use crate::envs::ResetRequest;
    use crate::rewards::{extract_answer, RewardContext, RewardInput, RewardRegistry, DEFAULT_ANSWER_MARKER};
    use crate::tools::{ToolCall, ToolErrorKind, ToolRegistry};
    use crate::trajectory::{
        ChatTemplate, MaskedRow, Segment, SegmentKind, Termination, Tokenizer, ToolCallRecord, Trajectory,
    };

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Query {
        pub prompt: String,
        #[serde(default)]
        pub answer: Option<String>,
        #[serde(default)]
        pub task_id: Option<String>,
        #[serde(default)]
        pub seed: Option<u64>,
        #[serde(default)]
        pub tools: Vec<String>,
        #[serde(default)]
        pub reward: Option<String>,
    }

    impl Query {
        pub fn new(prompt: impl Into<String>) -> Self {
            Self {
                prompt: prompt.into(),
                answer: None,
                task_id: None,
                seed: None,
                tools: Vec::new(),
                reward: None,
            }
        }

        /// How stateful tools start this query's episode.
        pub fn episode(&self) -> ResetRequest {
            ResetRequest {
                seed: self.seed,
                task_id: self.task_id.clone(),
                target: None,
            }
        }
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    pub struct RolloutSpec {
        pub queries: Vec<Query>,
        pub n_chains_per_query: usize,
        pub max_turns: u32,
        pub max_concurrent_chains: usize,
        /// Generation requests in flight at once; defaults to the chain limit.
        pub max_inflight_generations: Option<usize>,
        pub max_new_tokens: usize,
        pub system_prompt: Option<String>,
        #[serde(with = "secs")]
        pub tool_timeout: Duration,
        #[serde(with = "secs")]
        pub reward_timeout: Duration,
        /// Natural termination needs an explicit answer marker; a response
        /// with neither calls nor a marker gets corrective feedback instead.
        pub require_answer_marker: bool,
        pub answer_marker: String,
    }

    impl Default for RolloutSpec {
        fn default() -> Self {
            Self {
                queries: Vec::new(),
                n_chains_per_query: 16,
                max_turns: 4,
                max_concurrent_chains: 64,
                max_inflight_generations: None,
                max_new_tokens: 512,
                system_prompt: None,
                tool_timeout: Duration::from_secs(60),
                reward_timeout: Duration::from_secs(60),
                require_answer_marker: false,
                answer_marker: DEFAULT_ANSWER_MARKER.to_string(),
            }
        }
    }

    mod secs {
        use std::time::Duration;

        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
            s.serialize_f64(d.as_secs_f64())
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
            Duration::try_from_secs_f64(f64::deserialize(d)?).map_err(serde::de::Error::custom)
        }
    }

    #[derive(Debug, Clone, PartialEq, thiserror::Error)]
    pub enum RolloutError {
        #[error("rollout configuration error: {0}")]
        Config(String),
        #[error("chain task failed: {0}")]
        Join(String),
    }

    #[derive(Debug, Clone, PartialEq)]
    pub struct RolloutBatch {
        pub trajectories: Vec<Trajectory>,
        /// Masks assembled while the chains ran, aligned with `trajectories`.
        pub masks: Vec<MaskedRow>,
    }

    #[derive(Clone)]
    pub struct RolloutEngine {
        pub tools: Arc<ToolRegistry>,
        pub rewards: Arc<RewardRegistry>,
        pub policy: Arc<dyn Policy>,
        pub tokenizer: Arc<dyn Tokenizer>,
        pub template: ChatTemplate,
    }

    pub fn chain_id(group: usize, replica: usize) -> String {
        format!("q{group:04}-c{replica:02}")
    }

    /// Segments plus the mask built alongside them.
    struct Builder {
        traj: Trajectory,
        row: MaskedRow,
    }

    impl Builder {
        fn push(&mut self, seg: Segment) {
            let bit = seg.kind.mask_bit();
            self.row.token_ids.extend_from_slice(&seg.tokens);
            self.row.mask.extend(std::iter::repeat_n(bit, seg.tokens.len()));
            self.traj.segments.push(seg);
        }
    }

    impl RolloutEngine {
        pub fn new(
            tools: Arc<ToolRegistry>,
            rewards: Arc<RewardRegistry>,
            policy: Arc<dyn Policy>,
            tokenizer: Arc<dyn Tokenizer>,
        ) -> Self {
            Self {
                tools,
                rewards,
                policy,
                tokenizer,
                template: ChatTemplate::default(),
            }
        }

        pub fn validate(&self, spec: &RolloutSpec) -> Result<(), RolloutError> {
            let err = |m: String| Err(RolloutError::Config(m));
            if spec.n_chains_per_query == 0 {
                return err("rollout.n_chains_per_query must be >= 1".into());
            }
            if spec.max_turns == 0 {
                return err("rollout.max_turns must be >= 1".into());
            }
            if spec.max_concurrent_chains == 0 || spec.max_inflight_generations == Some(0) {
                return err("rollout concurrency limits must be >= 1".into());
            }
            for (i, q) in spec.queries.iter().enumerate() {
                for t in &q.tools {
                    if self.tools.spec(t).is_none() {
                        return err(format!("queries[{i}].tools: unknown tool {t:?}"));
                    }
                }
                if let Some(r) = &q.reward {
                    if !self.rewards.contains(r) {
                        return err(format!("queries[{i}].reward: unknown reward {r:?}"));
                    }
                }
            }
            Ok(())
        }

        /// Runs every chain of `spec` and returns the trajectories ordered by
        /// (group, replica).
        pub async fn run_rollout(&self, spec: &RolloutSpec) -> Result<RolloutBatch, RolloutError> {
            self.validate(spec)?;
            let spec = Arc::new(spec.clone());
            let chains = Arc::new(Semaphore::new(spec.max_concurrent_chains));
            let gens = Arc::new(Semaphore::new(
                spec.max_inflight_generations
                    .unwrap_or(spec.max_concurrent_chains),
            ));
            let mut set = JoinSet::new();
            for (g, _) in spec.queries.iter().enumerate() {
                for r in 0..spec.n_chains_per_query {
                    let engine = self.clone();
                    let spec = spec.clone();
                    let chains = chains.clone();
                    let gens = gens.clone();
                    set.spawn(async move {
                        let _permit = chains.acquire_owned().await.expect("semaphore open");
                        let out = engine.run_chain(&spec, g, r, &gens).await;
                        ((g, r), out)
                    });
                }
            }
            let mut results = Vec::with_capacity(set.len());
            while let Some(res) = set.join_next().await {
                results.push(res.map_err(|e| RolloutError::Join(e.to_string()))?);
            }
            results.sort_by_key(|(k, _)| *k);
            let (trajectories, masks) = results.into_iter().map(|(_, b)| (b.traj, b.row)).unzip();
            Ok(RolloutBatch { trajectories, masks })
        }

        async fn run_chain(
            &self,
            spec: &RolloutSpec,
            group: usize,
            replica: usize,
            gens: &Semaphore,
        ) -> Builder {
            let query = &spec.queries[group];
            let id = chain_id(group, replica);
            let tok = self.tokenizer.as_ref();
            let prompt_text = self
                .template
                .render_prompt(spec.system_prompt.as_deref(), &query.prompt);
            let prompt = Segment::encode(SegmentKind::Prompt, prompt_text, tok);
            let mut b = Builder {
                traj: Trajectory::new(&id, group, Segment::new(SegmentKind::Prompt, "", vec![])),
                row: MaskedRow {
                    token_ids: Vec::new(),
                    mask: Vec::new(),
                    group_index: group,
                },
            };
            b.traj.segments.clear();
            b.push(prompt);

            let schemas = self.tools.export_schemas(&query.tools).unwrap_or_default();
            let episode = query.episode();
            let mut messages = Vec::new();
            if let Some(sys) = &spec.system_prompt {
                messages.push(ChatMessage::new(Role::System, sys.clone()));
            }
            messages.push(ChatMessage::new(Role::User, query.prompt.clone()));

            let mut status = Termination::MaxTurns;
            let mut prediction: Option<String> = None;
            let mut invalid = 0usize;
            for turn in 0..spec.max_turns {
                let request = GenerateRequest {
                    chain_id: id.clone(),
                    group,
                    turn,
                    messages: messages.clone(),
                    tools: schemas.clone(),
                    max_new_tokens: spec.max_new_tokens,
                };
                let generation = {
                    let _permit = gens.acquire().await.expect("semaphore open");
                    self.policy.generate(&request).await
                };
                let generation = match generation {
                    Ok(g) => g,
                    Err(e) => {
                        tracing::warn!(chain_id = %id, turn, error = %e, "generation failed");
                        b.traj.metrics.insert("policy_error".into(), 1.0);
                        status = Termination::Error;
                        break;
                    }
                };
                let mut text = generation.text.clone();
                if !generation.tool_calls.is_empty() {
                    if !text.is_empty() && !text.ends_with('\n') {
                        text.push('\n');
                    }
                    text.push_str(&render_calls(&generation.tool_calls));
                }
                b.push(Segment::encode(SegmentKind::Response, text.clone(), tok));
                let mut assistant = ChatMessage::new(Role::Assistant, generation.text.clone());
                assistant.tool_calls = generation.tool_calls.clone();
                messages.push(assistant);

                let parsed = parse_actions(&generation.text, &generation.tool_calls);
                let answered = parsed.answer.is_some() || !spec.require_answer_marker;
                if parsed.final_answer && answered {
                    prediction = Some(
                        parsed
                            .answer
                            .unwrap_or_else(|| extract_answer(&text, &spec.answer_marker)),
                    );
                    status = Termination::Natural;
                    break;
                }
                if turn + 1 == spec.max_turns {
                    break;
                }
                let mut observations = Vec::new();
                if parsed.calls.is_empty() {
                    invalid += 1;
                    observations.push(format!(
                        "Error: no tool call or '{}' found. Call a tool or give the final answer.",
                        spec.answer_marker
                    ));
                }
                for call in parsed.calls {
                    let (observation, record) = match call.args {
                        Err(msg) => {
                            invalid += 1;
                            let record = ToolCallRecord {
                                turn,
                                name: call.name,
                                args: Value::Null,
                                valid: false,
                                error: Some(ToolErrorKind::BadArgs),
                            };
                            (msg, record)
                        }
                        Ok(args) => {
                            let tc = ToolCall::new(call.name.clone(), args.clone(), id.clone())
                                .with_episode(episode.clone());
                            let res = self
                                .tools
                                .invoke_offered(&tc, &query.tools, spec.tool_timeout)
                                .await;
                            invalid += usize::from(!res.valid);
                            let record = ToolCallRecord {
                                turn,
                                name: call.name,
                                args,
                                valid: res.valid,
                                error: res.error_kind,
                            };
                            (res.observation, record)
                        }
                    };
                    b.traj.tool_calls.push(record);
                    observations.push(observation);
                }
                let observation = observations.join("\n\n");
                b.push(Segment::encode(
                    SegmentKind::Observation,
                    self.template.render_observation(&observation),
                    tok,
                ));
                messages.push(ChatMessage::new(Role::Tool, observation));
            }
            b.traj.terminated = status;

            if status != Termination::Error {
                if let Some(name) = &query.reward {
                    let prediction = prediction.unwrap_or_else(|| {
                        b.traj
                            .final_response()
                            .map(|s| extract_answer(&s.text, &spec.answer_marker))
                            .unwrap_or_default()
                    });
                    let ctx = RewardContext {
                        input: RewardInput {
                            prediction: Some(prediction),
                            answer: query.answer.clone(),
                            trajectory: Some(b.traj.clone()),
                            chain_id: Some(id.clone()),
                        },
                        chain_id: id.clone(),
                        episode: Some(episode.clone()),
                    };
                    match self.rewards.evaluate(name, &ctx, spec.reward_timeout).await {
                        Ok(r) => {
                            b.traj.reward = r.reward;
                            b.traj.metrics.extend(r.extras);
                        }
                        Err(e) => {
                            tracing::warn!(chain_id = %id, reward = %name, error = %e, "reward failed");
                            b.traj.metrics.insert("reward_error".into(), 1.0);
                        }
                    }
                }
            }
            self.tools.pools().release_chain(&id).await;

            let t = &mut b.traj;
            let calls = t.tool_calls.len();
            let halluc = t.tool_calls.iter().filter(|c| c.is_hallucination()).count();
            let m = &mut t.metrics;
            m.insert(
                "turns".into(),
                t.segments
                    .iter()
                    .filter(|s| s.kind == SegmentKind::Response)
                    .count() as f64,
            );
            m.insert("tool_calls".into(), calls as f64);
            m.insert(
                "invalid_tool_calls".into(),
                t.tool_calls.iter().filter(|c| !c.valid).count() as f64,
            );
            m.insert("hallucinations".into(), halluc as f64);
            m.insert(
                "format_errors".into(),
                (invalid.saturating_sub(t.tool_calls.iter().filter(|c| !c.valid).count())) as f64,
            );
            m.insert("tokens".into(), b.row.token_ids.len() as f64);
            m.insert("response_tokens".into(), b.row.masked_count() as f64);
            b
        }
    }
}

#[cfg(all(test, feature = "runtime"))]
mod tests {
    use std::sync::Arc;
    use std::time::Duration;

    use super::policy::{Generation, PolicyError, ScriptedPolicy};
    use super::*;
    use crate::envpool::PoolManager;
    use crate::rewards::{self, RewardRegistry};
    use crate::tools::builtin;
    use crate::tools::ToolRegistry;
    use crate::trajectory::{build_mask, write_jsonl, ByteTokenizer, SegmentKind, Termination};

    fn engine(policy: impl policy::Policy + 'static, capacity: usize) -> RolloutEngine {
        let pools = Arc::new(PoolManager::new());
        let mut tools = ToolRegistry::new(pools.clone());
        builtin::register_calculator(&mut tools).unwrap();
        builtin::register_counter(&mut tools, builtin::counter_factory(), capacity).unwrap();
        let mut rw = RewardRegistry::new(pools);
        rewards::register_counter(&mut rw, None, capacity).unwrap();
        rewards::register_code_math(&mut rw, "Answer:").unwrap();
        RolloutEngine::new(
            Arc::new(tools),
            Arc::new(rw),
            Arc::new(policy),
            Arc::new(ByteTokenizer),
        )
    }

    fn counter_query(target: u64) -> Query {
        Query {
            seed: Some(target),
            tools: vec!["counter_step".into()],
            reward: Some("counter_reward".into()),
            ..Query::new("Increment the counter to its target.")
        }
    }

    const INC: &str = "Action: counter_step\nInput: {\"action\": \"inc\"}";

    #[tokio::test]
    async fn expands_queries_into_groups() {
        let e = engine(ScriptedPolicy::new(vec![INC, INC, "Answer: done"]), 16);
        let spec = RolloutSpec {
            queries: (0..4).map(|_| counter_query(2)).collect(),
            n_chains_per_query: 16,
            ..RolloutSpec::default()
        };
        let batch = e.run_rollout(&spec).await.unwrap();
        assert_eq!(batch.trajectories.len(), 64);
        for (i, t) in batch.trajectories.iter().enumerate() {
            assert_eq!(t.group, i / 16);
            assert_eq!(t.chain_id, chain_id(i / 16, i % 16));
            assert_eq!(t.terminated, Termination::Natural);
            assert_eq!(t.reward, 1.0);
            assert_eq!(t.metrics["tool_calls"], 2.0);
            t.validate().unwrap();
            assert_eq!(build_mask(t).unwrap(), batch.masks[i]);
        }
        assert_eq!(e.tools.pools().total_leased(), 0);
    }

    #[tokio::test]
    async fn max_turns_caps_chains() {
        let e = engine(ScriptedPolicy::new(vec![INC]), 4);
        let spec = RolloutSpec {
            queries: vec![counter_query(100)],
            n_chains_per_query: 4,
            max_turns: 4,
            ..RolloutSpec::default()
        };
        let batch = e.run_rollout(&spec).await.unwrap();
        for t in &batch.trajectories {
            assert_eq!(t.terminated, Termination::MaxTurns);
            assert_eq!(t.turns(), 4);
            // The capped turn's call is not executed.
            assert_eq!(t.tool_calls.len(), 3);
            assert_eq!(t.segments.last().unwrap().kind, SegmentKind::Response);
        }
    }

    #[tokio::test]
    async fn policy_failure_ends_only_that_chain() {
        let policy = ScriptedPolicy::from_fn(|req| {
            if req.chain_id.ends_with("c01") && req.turn == 1 {
                Err(PolicyError::Protocol("boom".into()))
            } else if req.turn == 0 {
                Ok(Generation::text(INC))
            } else {
                Ok(Generation::text("Answer: ok"))
            }
        });
        let e = engine(policy, 4);
        let spec = RolloutSpec {
            queries: vec![counter_query(1)],
            n_chains_per_query: 3,
            ..RolloutSpec::default()
        };
        let batch = e.run_rollout(&spec).await.unwrap();
        let status: Vec<_> = batch.trajectories.iter().map(|t| t.terminated).collect();
        assert_eq!(
            status,
            [Termination::Natural, Termination::Error, Termination::Natural]
        );
        assert_eq!(batch.trajectories[1].reward, 0.0);
        assert_eq!(batch.trajectories[0].reward, 1.0);
        assert_eq!(e.tools.pools().total_leased(), 0);
    }

    #[tokio::test]
    async fn bad_calls_are_fed_back_and_counted() {
        let e = engine(
            ScriptedPolicy::new(vec![
                "Action: calculator\nInput: {broken",
                "Action: counter_step\nInput: {\"action\": \"inc\"}\nAction: web_search\nInput: {}",
                "I think it is done.",
                "Answer: done",
            ]),
            2,
        );
        let spec = RolloutSpec {
            queries: vec![counter_query(1)],
            n_chains_per_query: 1,
            require_answer_marker: true,
            ..RolloutSpec::default()
        };
        let t = &e.run_rollout(&spec).await.unwrap().trajectories[0];
        assert_eq!(t.terminated, Termination::Natural);
        assert_eq!(t.turns(), 4);
        // calculator is registered but not offered to this query.
        let names: Vec<_> = t.tool_calls.iter().map(|c| (c.name.as_str(), c.valid)).collect();
        assert_eq!(
            names,
            [
                ("calculator", false),
                ("counter_step", true),
                ("web_search", false)
            ]
        );
        assert_eq!(t.metrics["hallucinations"], 2.0);
        assert_eq!(t.metrics["format_errors"], 1.0);
        let obs: Vec<_> = t
            .segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Observation)
            .map(|s| s.text.clone())
            .collect();
        assert!(
            obs[1].contains("Counter: 1.") && obs[1].contains("unknown tool 'web_search'"),
            "{}",
            obs[1]
        );
        assert!(obs[2].contains("no tool call"), "{}", obs[2]);
    }

    #[tokio::test]
    async fn rollouts_are_deterministic() {
        let run = || async {
            let e = engine(
                ScriptedPolicy::new(vec![INC, INC, "Answer: 2"]).with_latency(Duration::from_millis(1)),
                3,
            );
            let spec = RolloutSpec {
                queries: vec![counter_query(2), counter_query(5)],
                n_chains_per_query: 5,
                max_concurrent_chains: 4,
                ..RolloutSpec::default()
            };
            let mut out = Vec::new();
            write_jsonl(&mut out, &e.run_rollout(&spec).await.unwrap().trajectories).unwrap();
            out
        };
        assert_eq!(run().await, run().await);
    }

    #[tokio::test]
    async fn unknown_names_are_config_errors() {
        let e = engine(ScriptedPolicy::new(vec![INC]), 1);
        let mut q = counter_query(1);
        q.tools.push("nope".into());
        let spec = RolloutSpec {
            queries: vec![q],
            ..RolloutSpec::default()
        };
        let err = e.run_rollout(&spec).await.unwrap_err();
        assert!(err.to_string().contains("queries[0].tools"), "{err}");
    }
}
