//! Run configuration: one TOML file plus `CHAINFORGE_*` environment
//! overrides.
//!
//! An override names a key path with `__` between segments, e.g.
//! `CHAINFORGE_ROLLOUT__MAX_TURNS=8` or `CHAINFORGE_POLICY__ENDPOINT=...`.
//! Values are read as TOML literals when they parse as one and as plain
//! strings otherwise.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chainforge::algorithms::AlgoConfig;
use chainforge::rollout::{Query, RolloutSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const ENV_PREFIX: &str = "CHAINFORGE_";

/// Tools the CLI knows how to build, with the pool each one is bound to.
pub const TOOL_CATALOG: &[(&str, Option<&str>)] = &[
    ("calculator", None),
    ("lookup", None),
    ("gridhouse_step", Some("gridhouse")),
    ("gridhouse_get_admissible_commands", Some("gridhouse")),
    ("gridhouse_get_task_objective", Some("gridhouse")),
    ("counter_step", Some("counter")),
    ("code_interpreter", Some("python")),
];

pub const REWARD_CATALOG: &[(&str, Option<&str>)] = &[
    ("qa_f1_reward", None),
    ("code_math_reward", None),
    ("gridhouse_reward", Some("gridhouse")),
    ("counter_reward", Some("counter")),
];

pub fn tool_pool(name: &str) -> Option<Option<&'static str>> {
    TOOL_CATALOG.iter().find(|(n, _)| *n == name).map(|(_, p)| *p)
}

pub fn reward_pool(name: &str) -> Option<Option<&'static str>> {
    REWARD_CATALOG.iter().find(|(n, _)| *n == name).map(|(_, p)| *p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Replays `script`, one list of turns per query group.
    Scripted,
    /// Seeded GridHouse explorer driven by the transcript.
    Explorer,
    /// OpenAI-compatible chat-completions endpoint.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub endpoint: Option<String>,
    pub model: String,
    pub temperature: Option<f64>,
    pub script: Vec<Vec<String>>,
    pub latency_ms: u64,
    pub greed: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Explorer,
            endpoint: None,
            model: "policy".into(),
            temperature: None,
            script: Vec::new(),
            latency_ms: 0,
            greed: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Backend {
    #[default]
    InProcess,
    /// One remote environment server per pool instance.
    Http { urls: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolEntry {
    pub name: String,
    pub capacity: usize,
    #[serde(default)]
    pub backend: Backend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    #[default]
    Byte,
    Whitespace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub trajectories: String,
    pub stats: String,
    pub curve: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/latest"),
            trajectories: "trajectories.jsonl".into(),
            stats: "stats.json".into(),
            curve: "curve.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Tools offered to queries that do not list their own.
    pub tools: Vec<String>,
    /// Reward for queries that do not name their own.
    pub reward: Option<String>,
    /// Largest tolerated fraction of chains ending in an error.
    pub max_error_fraction: f64,
    pub tokenizer: TokenizerKind,
    /// GridHouse task file; the built-in fixtures when absent.
    pub fixtures: Option<PathBuf>,
    /// JSON object for the `lookup` tool.
    pub lookup_table: Option<PathBuf>,
    pub policy: PolicyConfig,
    pub rollout: RolloutSpec,
    pub algorithm: AlgoConfig,
    pub pools: Vec<PoolEntry>,
    pub output: OutputConfig,
    /// Trainer settings such as `learning_rate`. Echoed into the run
    /// directory, otherwise unused.
    pub trainer: toml::Table,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tools: Vec::new(),
            reward: None,
            max_error_fraction: 0.1,
            tokenizer: TokenizerKind::default(),
            fixtures: None,
            lookup_table: None,
            policy: PolicyConfig::default(),
            rollout: RolloutSpec::default(),
            algorithm: AlgoConfig::default(),
            pools: Vec::new(),
            output: OutputConfig::default(),
            trainer: toml::Table::new(),
        }
    }
}

/// Sets `path` (already split and lowercased) inside `table`.
fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut cur = table;
    for seg in parents {
        let next = cur
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| format!("{seg} is not a table"))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

fn literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `CHAINFORGE_*` variables from `vars` to a parsed config table.
pub fn apply_overrides(
    table: &mut toml::Table,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<Vec<String>, CliError> {
    let mut applied = Vec::new();
    let mut vars: Vec<_> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.len() > ENV_PREFIX.len())
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(str::to_lowercase)
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(CliError::Config(format!("{key}: malformed override name")));
        }
        set_path(table, &path, literal(&raw)).map_err(|e| CliError::Config(format!("{key}: {e}")))?;
        applied.push(path.join("."));
    }
    Ok(applied)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        Self::from_toml_with(text, std::iter::empty())
    }

    pub fn from_toml_with(
        text: &str,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        apply_overrides(&mut table, vars)?;
        let config: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads `path` with overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_with(&text, std::env::vars())
    }

    pub fn to_toml_string(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Tools and reward each query actually uses, after config defaults.
    pub fn resolved_queries(&self) -> Vec<Query> {
        self.rollout
            .queries
            .iter()
            .map(|q| {
                let mut q = q.clone();
                if q.tools.is_empty() {
                    q.tools = self.tools.clone();
                }
                if q.reward.is_none() {
                    q.reward = self.reward.clone();
                }
                q
            })
            .collect()
    }

    pub fn resolved_rollout(&self) -> RolloutSpec {
        RolloutSpec {
            queries: self.resolved_queries(),
            ..self.rollout.clone()
        }
    }

    /// Pools needed by the resolved queries.
    pub fn needed_pools(&self) -> BTreeSet<&'static str> {
        let mut out = BTreeSet::new();
        for q in self.resolved_queries() {
            out.extend(q.tools.iter().filter_map(|t| tool_pool(t).flatten()));
            out.extend(q.reward.iter().filter_map(|r| reward_pool(r).flatten()));
        }
        out
    }

    pub fn pool_entry(&self, name: &str) -> Option<&PoolEntry> {
        self.pools.iter().find(|p| p.name == name)
    }

    /// Checks every cross-reference; errors name the offending field.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut errs = Vec::new();
        let r = &self.rollout;
        if r.queries.is_empty() {
            errs.push("rollout.queries: at least one query is required".to_string());
        }
        if r.n_chains_per_query == 0 {
            errs.push("rollout.n_chains_per_query: must be >= 1".into());
        }
        if r.max_turns == 0 {
            errs.push("rollout.max_turns: must be >= 1".into());
        }
        if r.max_concurrent_chains == 0 {
            errs.push("rollout.max_concurrent_chains: must be >= 1".into());
        }
        if r.max_inflight_generations == Some(0) {
            errs.push("rollout.max_inflight_generations: must be >= 1".into());
        }
        for (i, t) in self.tools.iter().enumerate() {
            if tool_pool(t).is_none() {
                errs.push(format!("tools[{i}]: unknown tool {t:?}"));
            }
        }
        if let Some(rw) = &self.reward {
            if reward_pool(rw).is_none() {
                errs.push(format!("reward: unknown reward {rw:?}"));
            }
        }
        for (i, q) in r.queries.iter().enumerate() {
            for (j, t) in q.tools.iter().enumerate() {
                if tool_pool(t).is_none() {
                    errs.push(format!("rollout.queries[{i}].tools[{j}]: unknown tool {t:?}"));
                }
            }
            if let Some(rw) = &q.reward {
                if reward_pool(rw).is_none() {
                    errs.push(format!("rollout.queries[{i}].reward: unknown reward {rw:?}"));
                }
            }
        }
        let uses_lookup = self
            .resolved_queries()
            .iter()
            .any(|q| q.tools.iter().any(|t| t == "lookup"));
        if uses_lookup && self.lookup_table.is_none() {
            errs.push("lookup_table: required when the lookup tool is enabled".into());
        }
        let mut seen = BTreeSet::new();
        for (i, p) in self.pools.iter().enumerate() {
            if !matches!(p.name.as_str(), "gridhouse" | "counter" | "python") {
                errs.push(format!("pools[{i}].name: unknown pool {:?}", p.name));
            }
            if !seen.insert(p.name.as_str()) {
                errs.push(format!("pools[{i}].name: duplicate pool {:?}", p.name));
            }
            if p.capacity == 0 {
                errs.push(format!("pools[{i}].capacity: must be >= 1"));
            }
            if let Backend::Http { urls } = &p.backend {
                if urls.is_empty() {
                    errs.push(format!("pools[{i}].backend.urls: at least one URL is required"));
                }
            }
        }
        match self.policy.kind {
            PolicyKind::Remote if self.policy.endpoint.is_none() => {
                errs.push("policy.endpoint: required for a remote policy".into())
            }
            PolicyKind::Scripted if self.policy.script.iter().all(Vec::is_empty) => {
                errs.push("policy.script: a scripted policy needs at least one turn".into())
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.max_error_fraction) {
            errs.push("max_error_fraction: must be within [0, 1]".into());
        }
        if let Err(e) = self.algorithm.validate() {
            errs.push(format!("algorithm: {e}"));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errs.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEMO: &str = include_str!("../configs/demo.toml");

    fn vars(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn demo_parses_and_round_trips() {
        let c = RunConfig::from_toml_str(DEMO).unwrap();
        assert_eq!(c.rollout.queries.len(), 4);
        assert_eq!(c.rollout.n_chains_per_query, 16);
        let again = RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn env_overrides() {
        let c = RunConfig::from_toml_with(
            DEMO,
            vars(&[
                ("CHAINFORGE_ROLLOUT__MAX_TURNS", "4"),
                ("CHAINFORGE_SEED", "11"),
                ("CHAINFORGE_POLICY__ENDPOINT", "http://127.0.0.1:9/v1"),
                ("CHAINFORGE_TRAINER__LEARNING_RATE", "5e-7"),
                ("OTHER_ROLLOUT__MAX_TURNS", "99"),
            ]),
        )
        .unwrap();
        assert_eq!(c.rollout.max_turns, 4);
        assert_eq!(c.seed, 11);
        assert_eq!(c.policy.endpoint.as_deref(), Some("http://127.0.0.1:9/v1"));
        assert_eq!(c.trainer["learning_rate"].as_float(), Some(5e-7));
    }

    #[test]
    fn errors_name_fields() {
        let bad = DEMO.replacen("\"gridhouse_step\"", "\"gridhouse_stpe\"", 1);
        let err = RunConfig::from_toml_str(&bad).unwrap_err().to_string();
        assert!(
            err.contains("tools[0]") && err.contains("gridhouse_stpe"),
            "{err}"
        );

        let err = RunConfig::from_toml_with(DEMO, vars(&[("CHAINFORGE_ROLLOUT__N_CHAINS_PER_QUERY", "0")]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("rollout.n_chains_per_query"), "{err}");

        let err = RunConfig::from_toml_with(DEMO, vars(&[("CHAINFORGE_POLICY__KIND", "remote")]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("policy.endpoint"), "{err}");

        let err = RunConfig::from_toml_str("seed = 1\nbogus = 2\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn literal_values() {
        assert_eq!(literal("8"), toml::Value::Integer(8));
        assert_eq!(literal("true"), toml::Value::Boolean(true));
        assert_eq!(literal("a b"), toml::Value::String("a b".into()));
        assert_eq!(literal("[\"x\"]"), toml::Value::Array(vec!["x".into()]));
    }
}
