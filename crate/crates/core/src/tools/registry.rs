//! Tool registry and invocation.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde_json::{Map, Value};
use tokio::time::Instant;

use super::{truncate_observation, ToolError, ToolErrorKind, ToolSpec};
use crate::envpool::{PoolConfig, PoolError, PoolManager};
use crate::envs::{EnvError, EnvFactory, Environment, ResetRequest};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ToolFailure {
    #[error("{0}")]
    BadArgs(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[async_trait]
pub trait StatelessTool: Send + Sync {
    async fn call(&self, args: &Map<String, Value>) -> Result<String, ToolFailure>;
}

#[async_trait]
pub trait StatefulTool: Send + Sync {
    async fn call(&self, args: &Map<String, Value>, env: &mut dyn Environment)
        -> Result<String, ToolFailure>;
}

/// A stateless tool from a cheap synchronous function.
pub struct FnTool<F>(pub F);

#[async_trait]
impl<F> StatelessTool for FnTool<F>
where
    F: Fn(&Map<String, Value>) -> Result<String, ToolFailure> + Send + Sync,
{
    async fn call(&self, args: &Map<String, Value>) -> Result<String, ToolFailure> {
        (self.0)(args)
    }
}

/// A stateless tool from a blocking function; runs on the blocking pool so
/// it cannot stall the scheduler.
pub struct BlockingFnTool<F>(pub Arc<F>);

impl<F> BlockingFnTool<F> {
    pub fn new(f: F) -> Self {
        Self(Arc::new(f))
    }
}

#[async_trait]
impl<F> StatelessTool for BlockingFnTool<F>
where
    F: Fn(&Map<String, Value>) -> Result<String, ToolFailure> + Send + Sync + 'static,
{
    async fn call(&self, args: &Map<String, Value>) -> Result<String, ToolFailure> {
        let f = self.0.clone();
        let args = args.clone();
        tokio::task::spawn_blocking(move || f(&args))
            .await
            .map_err(|e| ToolFailure::Env(EnvError::Backend(e.to_string())))?
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolCall {
    pub tool_name: String,
    pub args: Value,
    pub chain_id: String,
    /// How a stateful tool's instance starts its episode on the chain's
    /// first use of it.
    pub episode: Option<ResetRequest>,
}

impl ToolCall {
    pub fn new(tool_name: impl Into<String>, args: Value, chain_id: impl Into<String>) -> Self {
        Self {
            tool_name: tool_name.into(),
            args,
            chain_id: chain_id.into(),
            episode: None,
        }
    }

    pub fn with_episode(mut self, episode: ResetRequest) -> Self {
        self.episode = Some(episode);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolResult {
    pub observation: String,
    pub valid: bool,
    pub latency: Duration,
    pub error_kind: Option<ToolErrorKind>,
}

impl ToolResult {
    fn ok(observation: String, latency: Duration) -> Self {
        Self {
            observation,
            valid: true,
            latency,
            error_kind: None,
        }
    }

    fn failed(kind: ToolErrorKind, observation: String, latency: Duration) -> Self {
        Self {
            observation,
            valid: false,
            latency,
            error_kind: Some(kind),
        }
    }
}

#[derive(Clone)]
enum Callable {
    Stateless(Arc<dyn StatelessTool>),
    Stateful(Arc<dyn StatefulTool>),
}

#[derive(Clone)]
struct Entry {
    spec: ToolSpec,
    callable: Callable,
}

/// Registered tools plus the pools their stateful members draw from.
/// Built once at startup, then shared read-only.
#[derive(Clone)]
pub struct ToolRegistry {
    tools: BTreeMap<String, Entry>,
    pools: Arc<PoolManager>,
}

impl fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ToolRegistry")
            .field("tools", &self.names())
            .field("pools", &self.pools)
            .finish()
    }
}

impl Default for ToolRegistry {
    fn default() -> Self {
        Self::new(Arc::new(PoolManager::new()))
    }
}

impl ToolRegistry {
    pub fn new(pools: Arc<PoolManager>) -> Self {
        Self {
            tools: BTreeMap::new(),
            pools,
        }
    }

    pub fn pools(&self) -> &Arc<PoolManager> {
        &self.pools
    }

    fn insert(&mut self, spec: ToolSpec, callable: Callable) -> Result<(), ToolError> {
        spec.check()?;
        if self.tools.contains_key(&spec.name) {
            return Err(ToolError::DuplicateTool(spec.name));
        }
        self.tools.insert(spec.name.clone(), Entry { spec, callable });
        Ok(())
    }

    pub fn register_stateless(
        &mut self,
        spec: ToolSpec,
        tool: impl StatelessTool + 'static,
    ) -> Result<(), ToolError> {
        if spec.stateful {
            return Err(ToolError::ConfigError(format!(
                "tool {:?} is declared stateful",
                spec.name
            )));
        }
        self.insert(spec, Callable::Stateless(Arc::new(tool)))
    }

    /// Registers a stateful tool. If its pool does not exist yet it is
    /// created from `factory` with `pool_size` instances.
    pub fn register_stateful(
        &mut self,
        spec: ToolSpec,
        tool: impl StatefulTool + 'static,
        factory: Option<EnvFactory>,
    ) -> Result<(), ToolError> {
        spec.check()?;
        if self.tools.contains_key(&spec.name) {
            return Err(ToolError::DuplicateTool(spec.name));
        }
        let Some(pool) = spec.env_pool.clone() else {
            return Err(ToolError::ConfigError(format!(
                "tool {:?} is not declared stateful",
                spec.name
            )));
        };
        if !self.pools.contains(&pool) {
            let Some(factory) = factory else {
                return Err(ToolError::ConfigError(format!(
                    "tool {:?}: pool {pool:?} does not exist and no environment factory was given",
                    spec.name
                )));
            };
            let config = PoolConfig::with_capacity(spec.pool_size.unwrap_or(1));
            self.pools
                .create_pool(&pool, config, factory)
                .map_err(|e| ToolError::ConfigError(e.to_string()))?;
        }
        self.insert(spec, Callable::Stateful(Arc::new(tool)))
    }

    pub fn spec(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.get(name).map(|e| &e.spec)
    }

    pub fn names(&self) -> Vec<String> {
        self.tools.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn export_schemas<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<Value>, ToolError> {
        names
            .iter()
            .map(|n| {
                self.spec(n.as_ref())
                    .map(ToolSpec::schema)
                    .ok_or_else(|| ToolError::UnknownTool(n.as_ref().to_string()))
            })
            .collect()
    }

    pub fn export_all(&self) -> Vec<Value> {
        self.tools.values().map(|e| e.spec.schema()).collect()
    }

    /// Runs one call. Never fails: every error becomes an invalid result
    /// whose observation describes the problem.
    pub async fn invoke(&self, call: &ToolCall, timeout: Duration) -> ToolResult {
        self.invoke_offered(call, &[] as &[&str], timeout).await
    }

    /// Like [`invoke`](Self::invoke), but a tool outside `offered` counts as
    /// unknown. An empty `offered` list offers every registered tool.
    pub async fn invoke_offered<S: AsRef<str>>(
        &self,
        call: &ToolCall,
        offered: &[S],
        timeout: Duration,
    ) -> ToolResult {
        let start = Instant::now();
        let visible = offered.is_empty() || offered.iter().any(|o| o.as_ref() == call.tool_name);
        let Some(entry) = self.tools.get(&call.tool_name).filter(|_| visible) else {
            let known = if offered.is_empty() {
                self.names().join(", ")
            } else {
                offered.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(", ")
            };
            return ToolResult::failed(
                ToolErrorKind::UnknownTool,
                format!(
                    "Error: unknown tool '{}'. Available tools: {known}",
                    call.tool_name
                ),
                start.elapsed(),
            );
        };
        let args = match entry.spec.validate_args(&call.args) {
            Ok(a) => a,
            Err(msg) => return ToolResult::failed(ToolErrorKind::BadArgs, msg, start.elapsed()),
        };
        let outcome = tokio::time::timeout(timeout, self.dispatch(entry, args, call)).await;
        let latency = start.elapsed();
        let limit = entry.spec.max_observation_chars;
        match outcome {
            Ok(Ok(text)) => ToolResult::ok(truncate_observation(text, limit), latency),
            Ok(Err(Failure::Tool(ToolFailure::BadArgs(msg)))) => {
                ToolResult::failed(ToolErrorKind::BadArgs, truncate_observation(msg, limit), latency)
            }
            Ok(Err(Failure::Tool(ToolFailure::Env(EnvError::Timeout(d)))))
            | Ok(Err(Failure::Pool(PoolError::Timeout { waited: d, .. }))) => ToolResult::failed(
                ToolErrorKind::Timeout,
                format!(
                    "Error: tool '{}' timed out after {:.1}s",
                    call.tool_name,
                    d.as_secs_f64()
                ),
                latency,
            ),
            Ok(Err(Failure::Tool(ToolFailure::Env(e)))) => ToolResult::failed(
                ToolErrorKind::EnvError,
                truncate_observation(format!("Error: {e}"), limit),
                latency,
            ),
            Ok(Err(Failure::Pool(e))) => {
                ToolResult::failed(ToolErrorKind::EnvError, format!("Error: {e}"), latency)
            }
            Err(_) => ToolResult::failed(
                ToolErrorKind::Timeout,
                format!(
                    "Error: tool '{}' timed out after {:.1}s",
                    call.tool_name,
                    timeout.as_secs_f64()
                ),
                latency,
            ),
        }
    }

    async fn dispatch(
        &self,
        entry: &Entry,
        args: &Map<String, Value>,
        call: &ToolCall,
    ) -> Result<String, Failure> {
        match &entry.callable {
            Callable::Stateless(tool) => tool.call(args).await.map_err(Failure::Tool),
            Callable::Stateful(tool) => {
                let pool = entry.spec.env_pool.as_deref().unwrap_or_default();
                let lease = self
                    .pools
                    .acquire(pool, &call.chain_id)
                    .await
                    .map_err(Failure::Pool)?;
                let mut guard = lease
                    .lock_started(call.episode.as_ref())
                    .await
                    .map_err(|e| match e {
                        PoolError::Backend(env) => Failure::Tool(ToolFailure::Env(env)),
                        other => Failure::Pool(other),
                    })?;
                tool.call(args, guard.env.as_mut()).await.map_err(Failure::Tool)
            }
        }
    }
}

enum Failure {
    Tool(ToolFailure),
    Pool(PoolError),
}

/// Built-in tools and environment factories.
pub mod builtin {
    use super::*;
    use crate::envs::gridhouse::{GridHouse, GridHouseFixtures};
    use crate::envs::sandbox::{PythonSandbox, SandboxConfig};
    use crate::envs::CounterEnv;
    use crate::tools::{calculator, LookupTable, ParamType};

    pub const GRIDHOUSE_POOL: &str = "gridhouse";
    pub const COUNTER_POOL: &str = "counter";
    pub const PYTHON_POOL: &str = "python";

    fn str_arg<'a>(args: &'a Map<String, Value>, key: &str) -> &'a str {
        args.get(key).and_then(Value::as_str).unwrap_or_default()
    }

    pub fn calculator_spec() -> ToolSpec {
        ToolSpec::stateless("calculator", "Calculate the result of a mathematical expression.").param(
            "expression",
            ParamType::String,
            "A mathematical expression using + - * / % ** and parentheses.",
            true,
        )
    }

    pub fn calculator_tool() -> impl StatelessTool {
        FnTool(|args: &Map<String, Value>| {
            calculator::evaluate(str_arg(args, "expression"))
                .map(calculator::format_number)
                .map_err(|e| ToolFailure::BadArgs(format!("Error: {e}")))
        })
    }

    pub fn lookup_spec() -> ToolSpec {
        ToolSpec::stateless(
            "lookup",
            "Look up a query in the knowledge base and return the matching document.",
        )
        .param("query", ParamType::String, "The search query.", true)
    }

    pub fn lookup_tool(table: Arc<LookupTable>) -> impl StatelessTool {
        FnTool(move |args: &Map<String, Value>| Ok(table.answer(str_arg(args, "query"))))
    }

    pub fn gridhouse_factory(fixtures: Arc<GridHouseFixtures>) -> EnvFactory {
        Arc::new(move |_| Ok(Box::new(GridHouse::new(fixtures.clone())) as Box<dyn Environment>))
    }

    pub fn counter_factory() -> EnvFactory {
        Arc::new(|_| Ok(Box::new(CounterEnv::new()) as Box<dyn Environment>))
    }

    pub fn sandbox_factory(config: SandboxConfig) -> EnvFactory {
        Arc::new(move |_| Ok(Box::new(PythonSandbox::new(config.clone())?) as Box<dyn Environment>))
    }

    struct EnvStep;

    #[async_trait]
    impl StatefulTool for EnvStep {
        async fn call(
            &self,
            args: &Map<String, Value>,
            env: &mut dyn Environment,
        ) -> Result<String, ToolFailure> {
            let key = if args.contains_key("code") {
                "code"
            } else {
                "action"
            };
            Ok(env.step(str_arg(args, key)).await?.observation)
        }
    }

    struct Admissible;

    #[async_trait]
    impl StatefulTool for Admissible {
        async fn call(
            &self,
            _args: &Map<String, Value>,
            env: &mut dyn Environment,
        ) -> Result<String, ToolFailure> {
            Ok(env.admissible_commands().await?.join("\n"))
        }
    }

    struct Objective;

    #[async_trait]
    impl StatefulTool for Objective {
        async fn call(
            &self,
            _args: &Map<String, Value>,
            env: &mut dyn Environment,
        ) -> Result<String, ToolFailure> {
            Ok(env.task_objective().await?)
        }
    }

    pub fn register_calculator(reg: &mut ToolRegistry) -> Result<(), ToolError> {
        reg.register_stateless(calculator_spec(), calculator_tool())
    }

    pub fn register_lookup(reg: &mut ToolRegistry, table: Arc<LookupTable>) -> Result<(), ToolError> {
        reg.register_stateless(lookup_spec(), lookup_tool(table))
    }

    /// `gridhouse_step`, `gridhouse_get_admissible_commands` and
    /// `gridhouse_get_task_objective`, all bound to one pool.
    pub fn register_gridhouse(
        reg: &mut ToolRegistry,
        factory: EnvFactory,
        pool_size: usize,
    ) -> Result<(), ToolError> {
        let step = ToolSpec::stateful(
            "gridhouse_step",
            "Execute one text action in the household environment and return what happens.",
            GRIDHOUSE_POOL,
            pool_size,
        )
        .param(
            "action",
            ParamType::String,
            "The action to perform, e.g. 'go to desk 1'.",
            true,
        );
        let admissible = ToolSpec::stateful(
            "gridhouse_get_admissible_commands",
            "List every action that is currently valid, one per line.",
            GRIDHOUSE_POOL,
            pool_size,
        );
        let objective = ToolSpec::stateful(
            "gridhouse_get_task_objective",
            "Return the objective of the current task.",
            GRIDHOUSE_POOL,
            pool_size,
        );
        reg.register_stateful(step, EnvStep, Some(factory))?;
        reg.register_stateful(admissible, Admissible, None)?;
        reg.register_stateful(objective, Objective, None)
    }

    pub fn register_counter(
        reg: &mut ToolRegistry,
        factory: EnvFactory,
        pool_size: usize,
    ) -> Result<(), ToolError> {
        let spec = ToolSpec::stateful(
            "counter_step",
            "Send an action to the counter environment ('inc' increments it).",
            COUNTER_POOL,
            pool_size,
        )
        .param("action", ParamType::String, "The action to send.", true);
        reg.register_stateful(spec, EnvStep, Some(factory))
    }

    pub fn register_code_interpreter(
        reg: &mut ToolRegistry,
        config: SandboxConfig,
        pool_size: usize,
    ) -> Result<(), ToolError> {
        let spec = ToolSpec::stateful(
            "code_interpreter",
            "Run Python code and return anything printed to stdout or stderr. Variables persist between calls.",
            PYTHON_POOL,
            pool_size,
        )
        .param("code", ParamType::String, "The Python code to execute.", true);
        reg.register_stateful(spec, EnvStep, Some(sandbox_factory(config)))
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::builtin::*;
    use super::*;

    fn registry() -> ToolRegistry {
        let mut reg = ToolRegistry::default();
        register_calculator(&mut reg).unwrap();
        register_counter(&mut reg, counter_factory(), 2).unwrap();
        reg
    }

    const T: Duration = Duration::from_secs(5);

    #[tokio::test]
    async fn calculator_call() {
        let reg = registry();
        let r = reg
            .invoke(
                &ToolCall::new("calculator", json!({"expression": "2+3*4"}), "c"),
                T,
            )
            .await;
        assert_eq!(r.observation, "14");
        assert!(r.valid);
        assert_eq!(r.error_kind, None);
    }

    #[tokio::test]
    async fn unknown_tool_and_bad_args() {
        let reg = registry();
        let r = reg.invoke(&ToolCall::new("fly", json!({}), "c"), T).await;
        assert!(!r.valid);
        assert_eq!(r.error_kind, Some(ToolErrorKind::UnknownTool));
        assert!(r.observation.contains("fly"));
        let r = reg
            .invoke(&ToolCall::new("calculator", json!({"expression": 3}), "c"), T)
            .await;
        assert_eq!(r.error_kind, Some(ToolErrorKind::BadArgs));
        let r = reg
            .invoke(&ToolCall::new("calculator", json!({"expression": "1/0"}), "c"), T)
            .await;
        assert_eq!(r.error_kind, Some(ToolErrorKind::BadArgs));
    }

    #[tokio::test]
    async fn duplicate_and_dangling_pool() {
        let mut reg = registry();
        assert_eq!(
            register_calculator(&mut reg),
            Err(ToolError::DuplicateTool("calculator".into()))
        );
        let spec = ToolSpec::stateful("x", "d", "nowhere", 1);
        struct Nop;
        #[async_trait]
        impl StatefulTool for Nop {
            async fn call(
                &self,
                _: &Map<String, Value>,
                _: &mut dyn Environment,
            ) -> Result<String, ToolFailure> {
                Ok(String::new())
            }
        }
        assert!(matches!(
            reg.register_stateful(spec, Nop, None),
            Err(ToolError::ConfigError(_))
        ));
    }

    #[tokio::test]
    async fn schemas() {
        let reg = registry();
        let s = reg.export_schemas(&["calculator"]).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0]["function"]["name"], "calculator");
        assert!(reg.export_schemas::<&str>(&[]).unwrap().is_empty());
        assert_eq!(reg.export_all().len(), reg.len());
        assert!(matches!(
            reg.export_schemas(&["nope"]),
            Err(ToolError::UnknownTool(_))
        ));
    }

    #[tokio::test]
    async fn same_chain_same_instance() {
        let reg = registry();
        let step = |chain: &str| {
            ToolCall::new("counter_step", json!({"action": "inc"}), chain)
                .with_episode(ResetRequest::seed(100))
        };
        assert_eq!(reg.invoke(&step("a"), T).await.observation, "Counter: 1.");
        assert_eq!(reg.invoke(&step("a"), T).await.observation, "Counter: 2.");
        assert_eq!(reg.invoke(&step("b"), T).await.observation, "Counter: 1.");
        let leases = reg.pools().get(COUNTER_POOL).unwrap().leases();
        assert_ne!(leases["a"], leases["b"]);
    }

    #[tokio::test]
    async fn stateless_calls_leave_pools_alone() {
        let reg = registry();
        let before = reg.pools().metrics();
        for _ in 0..5 {
            reg.invoke(&ToolCall::new("calculator", json!({"expression": "1"}), "z"), T)
                .await;
        }
        assert_eq!(reg.pools().metrics(), before);
    }

    #[tokio::test]
    async fn long_output_is_truncated() {
        let mut reg = ToolRegistry::default();
        reg.register_stateless(
            ToolSpec::stateless("spam", "d").max_observation_chars(10),
            FnTool(|_: &Map<String, Value>| Ok("x".repeat(25))),
        )
        .unwrap();
        let r = reg.invoke(&ToolCall::new("spam", json!({}), "c"), T).await;
        assert_eq!(
            r.observation,
            format!("{}\n...[truncated 15 chars]", "x".repeat(10))
        );
    }
}
