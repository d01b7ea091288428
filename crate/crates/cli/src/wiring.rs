//! Builds pools, registries and the policy described by a [`RunConfig`].

use std::sync::Arc;
use std::time::Duration;

use chainforge::envpool::{PoolConfig, PoolManager};
use chainforge::envs::gridhouse::GridHouseFixtures;
use chainforge::envs::http::{http_factory, HttpClientConfig};
use chainforge::envs::sandbox::SandboxConfig;
use chainforge::envs::EnvFactory;
use chainforge::rewards::{self, RewardRegistry};
use chainforge::rollout::policy::{ExplorerPolicy, Policy, RemotePolicy, ScriptedPolicy};
use chainforge::rollout::RolloutEngine;
use chainforge::tools::{builtin, LookupTable, ToolRegistry};
use chainforge::trajectory::{ByteTokenizer, Tokenizer, WhitespaceTokenizer};

use crate::config::{Backend, PolicyKind, RunConfig, TokenizerKind};
use crate::CliError;

pub fn load_fixtures(cfg: &RunConfig) -> Result<Arc<GridHouseFixtures>, CliError> {
    let fixtures = match &cfg.fixtures {
        None => GridHouseFixtures::builtin(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("fixtures: {}: {e}", path.display())))?;
            GridHouseFixtures::from_toml_str(&text).map_err(|e| CliError::Config(format!("fixtures: {e}")))?
        }
    };
    Ok(Arc::new(fixtures))
}

fn in_process_factory(pool: &str, cfg: &RunConfig) -> Result<EnvFactory, CliError> {
    Ok(match pool {
        "gridhouse" => builtin::gridhouse_factory(load_fixtures(cfg)?),
        "counter" => builtin::counter_factory(),
        "python" => builtin::sandbox_factory(SandboxConfig::default()),
        other => return Err(CliError::Config(format!("pools: unknown pool {other:?}"))),
    })
}

pub fn build_policy(cfg: &RunConfig) -> Result<Arc<dyn Policy>, CliError> {
    let p = &cfg.policy;
    let latency = Duration::from_millis(p.latency_ms);
    Ok(match p.kind {
        PolicyKind::Scripted => Arc::new(ScriptedPolicy::per_group(p.script.clone()).with_latency(latency)),
        PolicyKind::Explorer => Arc::new(ExplorerPolicy {
            seed: cfg.seed,
            greed: p.greed,
            latency,
        }),
        PolicyKind::Remote => {
            let endpoint = p
                .endpoint
                .clone()
                .ok_or_else(|| CliError::Config("policy.endpoint: required for a remote policy".into()))?;
            let mut remote = RemotePolicy::new(endpoint, p.model.clone()).map_err(CliError::runtime)?;
            remote.temperature = p.temperature;
            Arc::new(remote)
        }
    })
}

/// Creates every pool the queries need and registers their tools and
/// rewards on a shared pool manager.
pub fn build_engine(cfg: &RunConfig) -> Result<RolloutEngine, CliError> {
    let pools = Arc::new(PoolManager::new());
    for name in cfg.needed_pools() {
        let entry = cfg.pool_entry(name);
        let capacity = entry.map_or(cfg.rollout.max_concurrent_chains, |e| e.capacity);
        let factory = match entry.map(|e| &e.backend) {
            Some(Backend::Http { urls }) => http_factory(urls.clone(), HttpClientConfig::default()),
            _ => in_process_factory(name, cfg)?,
        };
        pools
            .create_pool(name, PoolConfig::with_capacity(capacity), factory)
            .map_err(|e| CliError::Config(format!("pools: {e}")))?;
    }

    let queries = cfg.resolved_queries();
    let wants_tool = |t: &str| queries.iter().any(|q| q.tools.iter().any(|x| x == t));
    let wants_reward = |r: &str| queries.iter().any(|q| q.reward.as_deref() == Some(r));
    let cfg_err = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());

    let mut tools = ToolRegistry::new(pools.clone());
    if wants_tool("calculator") {
        builtin::register_calculator(&mut tools).map_err(|e| cfg_err(&e))?;
    }
    if wants_tool("lookup") {
        let path = cfg.lookup_table.as_ref().ok_or_else(|| {
            CliError::Config("lookup_table: required when the lookup tool is enabled".into())
        })?;
        let table = LookupTable::from_file(path)
            .map_err(|e| CliError::Config(format!("lookup_table: {}: {e}", path.display())))?;
        builtin::register_lookup(&mut tools, Arc::new(table)).map_err(|e| cfg_err(&e))?;
    }
    if [
        "gridhouse_step",
        "gridhouse_get_admissible_commands",
        "gridhouse_get_task_objective",
    ]
    .iter()
    .any(|t| wants_tool(t))
    {
        let f = in_process_factory("gridhouse", cfg)?;
        builtin::register_gridhouse(&mut tools, f, 1).map_err(|e| cfg_err(&e))?;
    }
    if wants_tool("counter_step") {
        builtin::register_counter(&mut tools, builtin::counter_factory(), 1).map_err(|e| cfg_err(&e))?;
    }
    if wants_tool("code_interpreter") {
        builtin::register_code_interpreter(&mut tools, SandboxConfig::default(), 1)
            .map_err(|e| cfg_err(&e))?;
    }

    let mut rw = RewardRegistry::new(pools);
    if wants_reward("qa_f1_reward") {
        rewards::register_qa_f1(&mut rw).map_err(|e| cfg_err(&e))?;
    }
    if wants_reward("code_math_reward") {
        rewards::register_code_math(&mut rw, &cfg.rollout.answer_marker).map_err(|e| cfg_err(&e))?;
    }
    if wants_reward("gridhouse_reward") {
        rewards::register_gridhouse(&mut rw, None, 1).map_err(|e| cfg_err(&e))?;
    }
    if wants_reward("counter_reward") {
        rewards::register_counter(&mut rw, None, 1).map_err(|e| cfg_err(&e))?;
    }

    let tokenizer: Arc<dyn Tokenizer> = match cfg.tokenizer {
        TokenizerKind::Byte => Arc::new(ByteTokenizer),
        TokenizerKind::Whitespace => Arc::new(WhitespaceTokenizer),
    };
    Ok(RolloutEngine::new(
        Arc::new(tools),
        Arc::new(rw),
        build_policy(cfg)?,
        tokenizer,
    ))
}
