//! The subcommands. Each returns a value the binary prints and the tests
//! inspect; nothing here calls `process::exit`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chainforge::algorithms::{compute_advantages, ppo_clip_loss, AlgoConfig, Algorithm, TokenInputs};
use chainforge::envs::conformance::{run_conformance, ConformanceProfile, ConformanceReport};
use chainforge::envs::http::{serve, EnvServer};
use chainforge::envs::{CounterEnv, EnvFactory, Environment, GridHouse};
use chainforge::rollout::{
    chain_id, chain_stats, curve_rows, stats::curve_table, ChainStats, CurveRow, RolloutBatch,
};
use chainforge::trajectory::{build_mask, read_jsonl, write_jsonl, MaskedRow, Termination, Trajectory};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::wiring::{build_engine, load_fixtures};
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutReport {
    pub batch: RolloutBatch,
    pub stats: ChainStats,
    pub output_dir: PathBuf,
}

/// Checks that every stored mask equals the one recomputed from segments.
pub fn check_masks(trajectories: &[Trajectory], masks: &[MaskedRow]) -> Result<(), CliError> {
    if trajectories.len() != masks.len() {
        return Err(CliError::Runtime(format!(
            "{} trajectories but {} masks",
            trajectories.len(),
            masks.len()
        )));
    }
    for (t, m) in trajectories.iter().zip(masks) {
        t.validate()
            .map_err(|e| CliError::Runtime(format!("{}: {e}", t.chain_id)))?;
        let recomputed = build_mask(t).map_err(CliError::runtime)?;
        if &recomputed != m {
            return Err(CliError::Runtime(format!(
                "{}: stored mask differs from segments",
                t.chain_id
            )));
        }
    }
    Ok(())
}

/// Runs the configured rollout and writes trajectories, stats and the
/// resolved config into the output directory.
pub async fn cmd_rollout(cfg: &RunConfig) -> Result<RolloutReport, CliError> {
    let engine = build_engine(cfg)?;
    let spec = cfg.resolved_rollout();
    let batch = engine.run_rollout(&spec).await.map_err(|e| match e {
        chainforge::rollout::RolloutError::Config(m) => CliError::Config(m),
        other => CliError::runtime(other),
    })?;
    check_masks(&batch.trajectories, &batch.masks)?;
    let leased = engine.tools.pools().total_leased();
    if leased != 0 {
        return Err(CliError::Runtime(format!(
            "{leased} leases outstanding after the rollout"
        )));
    }
    let stats = chain_stats(&batch.trajectories).map_err(CliError::runtime)?;

    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    let io = |p: &Path, e: std::io::Error| CliError::Runtime(format!("{}: {e}", p.display()));
    let path = dir.join(&cfg.output.trajectories);
    let file = File::create(&path).map_err(|e| io(&path, e))?;
    let mut out = BufWriter::new(file);
    write_jsonl(&mut out, &batch.trajectories).map_err(|e| io(&path, e))?;
    out.flush().map_err(|e| io(&path, e))?;
    let path = dir.join(&cfg.output.stats);
    let text = serde_json::to_string_pretty(&stats).map_err(CliError::runtime)?;
    std::fs::write(&path, text + "\n").map_err(|e| io(&path, e))?;
    let curve = curve_rows(&batch.trajectories).map_err(CliError::runtime)?;
    let path = dir.join(&cfg.output.curve);
    std::fs::write(&path, curve_csv(&curve)?).map_err(|e| io(&path, e))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml_string()?).map_err(|e| io(&path, e))?;

    let errors = stats.terminations.get("error").copied().unwrap_or(0);
    let fraction = errors as f64 / stats.chains as f64;
    if fraction > cfg.max_error_fraction {
        return Err(CliError::Threshold(format!(
            "{errors} of {} chains ended in an error ({fraction:.3} > max_error_fraction {})",
            stats.chains, cfg.max_error_fraction
        )));
    }
    Ok(RolloutReport {
        batch,
        stats,
        output_dir: dir,
    })
}

pub fn format_stats(s: &ChainStats) -> String {
    let mut out = String::new();
    let mut line = |k: &str, v: String| out.push_str(&format!("{k:<22} {v}\n"));
    line("chains", s.chains.to_string());
    line("mean_reward", format!("{:.4}", s.mean_reward));
    line("mean_turns", format!("{:.3}", s.mean_turns));
    line("mean_tool_calls", format!("{:.3}", s.mean_tool_calls));
    line("total_tool_calls", s.total_tool_calls.to_string());
    line("invalid_rate", format!("{:.4}", s.invalid_rate));
    line("hallucination_rate", format!("{:.4}", s.hallucination_rate));
    line("mean_tokens", format!("{:.1}", s.mean_tokens));
    line("mean_response_tokens", format!("{:.1}", s.mean_response_tokens));
    for (k, v) in &s.terminations {
        line(&format!("terminated.{k}"), v.to_string());
    }
    for (k, v) in &s.per_tool_calls {
        line(&format!("calls.{k}"), v.to_string());
    }
    out
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    read_jsonl(BufReader::new(file)).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsReport {
    pub stats: ChainStats,
    pub curve: Vec<CurveRow>,
    pub csv: String,
}

/// Whole-file statistics plus one curve row per concatenated batch.
pub fn cmd_stats(path: &Path) -> Result<StatsReport, CliError> {
    let trajectories = load_trajectories(path)?;
    let stats = chain_stats(&trajectories).map_err(CliError::runtime)?;
    let curve = curve_rows(&trajectories).map_err(CliError::runtime)?;
    let csv = curve_csv(&curve)?;
    Ok(StatsReport { stats, curve, csv })
}

fn curve_csv(curve: &[CurveRow]) -> Result<String, CliError> {
    let (header, rows) = curve_table(curve);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).map_err(CliError::runtime)?;
    for r in &rows {
        w.write_record(r).map_err(CliError::runtime)?;
    }
    String::from_utf8(w.into_inner().map_err(CliError::runtime)?).map_err(CliError::runtime)
}

/// Token-aligned inputs for one trajectory, keyed by chain ID.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SidecarRow {
    pub chain_id: String,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub old_logprobs: Option<Vec<f64>>,
    #[serde(default)]
    pub new_logprobs: Option<Vec<f64>>,
    #[serde(default)]
    pub ref_logprobs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub chain_id: String,
    pub group: usize,
    pub reward: f64,
    pub algorithm: Algorithm,
    pub advantages: Vec<f64>,
    pub mask: Vec<u8>,
    pub config: AlgoConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageReport {
    pub records: Vec<AdvantageRecord>,
    /// Sum of the per-chain scalar advantages in each group.
    pub group_sums: BTreeMap<usize, f64>,
    pub masked_mean: f64,
    pub masked_std: f64,
    pub ppo_loss: Option<f64>,
}

pub fn load_sidecar(path: &Path) -> Result<BTreeMap<String, SidecarRow>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(CliError::runtime)?;
        if line.trim().is_empty() {
            continue;
        }
        let row: SidecarRow = serde_json::from_str(&line)
            .map_err(|e| CliError::Runtime(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.insert(row.chain_id.clone(), row);
    }
    Ok(out)
}

/// Chains absent from groups that should hold `n` each. Chain IDs that do
/// not follow the engine's naming are reported by count.
pub fn missing_chains(trajectories: &[Trajectory], n: usize) -> Vec<String> {
    let mut by_group: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
    for t in trajectories {
        by_group.entry(t.group).or_default().insert(t.chain_id.as_str());
    }
    let Some(&last) = by_group.keys().next_back() else {
        return Vec::new();
    };
    let mut missing = Vec::new();
    for g in 0..=last {
        let present = by_group.get(&g).cloned().unwrap_or_default();
        if present.len() >= n {
            continue;
        }
        let absent: Vec<String> = (0..n)
            .map(|r| chain_id(g, r))
            .filter(|id| !present.contains(id.as_str()))
            .collect();
        if absent.len() == n - present.len() {
            missing.extend(absent);
        } else {
            missing.push(format!("group {g}: {} of {n} chains", present.len()));
        }
    }
    missing
}

fn aligned<'a>(
    trajectories: &[Trajectory],
    sidecar: &'a BTreeMap<String, SidecarRow>,
    pick: impl Fn(&'a SidecarRow) -> Option<&'a Vec<f64>>,
) -> Result<Option<Vec<Vec<f64>>>, CliError> {
    let rows: Vec<Option<&Vec<f64>>> = trajectories
        .iter()
        .map(|t| sidecar.get(&t.chain_id).and_then(&pick))
        .collect();
    if rows.iter().all(Option::is_none) {
        return Ok(None);
    }
    rows.iter()
        .zip(trajectories)
        .map(|(r, t)| {
            r.cloned()
                .ok_or_else(|| CliError::Runtime(format!("sidecar lacks a row for {}", t.chain_id)))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

/// Computes advantages for every trajectory in `path`. `expected_chains`
/// is the group size group-based estimators require.
pub fn cmd_advantages(
    path: &Path,
    config: &AlgoConfig,
    expected_chains: Option<usize>,
    sidecar: Option<&Path>,
) -> Result<AdvantageReport, CliError> {
    config
        .validate()
        .map_err(|e| CliError::Config(format!("algorithm: {e}")))?;
    let trajectories = load_trajectories(path)?;
    if trajectories.is_empty() {
        return Err(CliError::Runtime(format!("{}: no trajectories", path.display())));
    }
    if config.algorithm.is_group_based() {
        if let Some(n) = expected_chains {
            let missing = missing_chains(&trajectories, n);
            if !missing.is_empty() {
                return Err(CliError::GroupIncomplete(missing));
            }
        }
    }
    let rows: Vec<MaskedRow> = trajectories
        .iter()
        .map(build_mask)
        .collect::<Result<_, _>>()
        .map_err(CliError::runtime)?;
    let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
    let side = match sidecar {
        Some(p) => load_sidecar(p)?,
        None => BTreeMap::new(),
    };
    let values = aligned(&trajectories, &side, |r| r.values.as_ref())?;
    let old = aligned(&trajectories, &side, |r| r.old_logprobs.as_ref())?;
    let new = aligned(&trajectories, &side, |r| r.new_logprobs.as_ref())?;
    let reference = aligned(&trajectories, &side, |r| r.ref_logprobs.as_ref())?;
    let inputs = TokenInputs {
        values: values.as_deref(),
        old_logprobs: old.as_deref(),
        ref_logprobs: reference.as_deref(),
    };
    let batch = compute_advantages(config, &rows, &rewards, &inputs).map_err(CliError::runtime)?;
    let ppo_loss = match (&new, &old) {
        (Some(n), Some(o)) => Some(
            ppo_clip_loss(n, o, &batch, config.clip_epsilon)
                .map_err(CliError::runtime)?
                .loss,
        ),
        _ => None,
    };

    let mut group_sums = BTreeMap::new();
    let mut masked = Vec::new();
    for (i, adv) in batch.advantages.iter().enumerate() {
        let scalar = adv
            .iter()
            .zip(&batch.mask[i])
            .find(|(_, &m)| m == 1)
            .map_or(0.0, |(a, _)| *a);
        *group_sums.entry(batch.group_index[i]).or_insert(0.0) += scalar;
        masked.extend(
            adv.iter()
                .zip(&batch.mask[i])
                .filter(|(_, &m)| m == 1)
                .map(|(a, _)| *a),
        );
    }
    let n = masked.len().max(1) as f64;
    let masked_mean = masked.iter().sum::<f64>() / n;
    let masked_std = (masked.iter().map(|a| (a - masked_mean).powi(2)).sum::<f64>() / n).sqrt();
    let records = trajectories
        .iter()
        .zip(batch.advantages)
        .zip(batch.mask)
        .map(|((t, advantages), mask)| AdvantageRecord {
            chain_id: t.chain_id.clone(),
            group: t.group,
            reward: t.reward,
            algorithm: config.algorithm,
            advantages,
            mask,
            config: config.clone(),
        })
        .collect();
    Ok(AdvantageReport {
        records,
        group_sums,
        masked_mean,
        masked_std,
        ppo_loss,
    })
}

pub fn write_advantages(path: &Path, records: &[AdvantageRecord]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(CliError::runtime)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Chain counts per termination, for comparing runs.
pub fn termination_counts(trajectories: &[Trajectory]) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for t in trajectories {
        let k = match t.terminated {
            Termination::Natural => "natural",
            Termination::MaxTurns => "max_turns",
            Termination::Error => "error",
        };
        *out.entry(k).or_insert(0) += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServedEnv {
    GridHouse,
    Counter,
}

impl std::str::FromStr for ServedEnv {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gridhouse" => Ok(ServedEnv::GridHouse),
            "counter" => Ok(ServedEnv::Counter),
            other => Err(format!("unknown environment {other:?} (gridhouse, counter)")),
        }
    }
}

/// Starts an environment server; the caller decides how long it runs.
pub async fn start_env_server(
    env: ServedEnv,
    addr: SocketAddr,
    fixtures: Option<PathBuf>,
) -> Result<EnvServer, CliError> {
    let factory: EnvFactory = match env {
        ServedEnv::Counter => Arc::new(|_| Ok(Box::new(CounterEnv::new()) as Box<dyn Environment>)),
        ServedEnv::GridHouse => {
            let cfg = RunConfig {
                fixtures,
                ..RunConfig::default()
            };
            let fx = load_fixtures(&cfg)?;
            Arc::new(move |_| Ok(Box::new(GridHouse::new(fx.clone())) as Box<dyn Environment>))
        }
    };
    serve(factory, addr).await.map_err(CliError::runtime)
}

pub async fn cmd_conformance(url: &str, profile: ConformanceProfile) -> Result<ConformanceReport, CliError> {
    let report = run_conformance(url, profile).await;
    if report.all_passed() {
        Ok(report)
    } else {
        Err(CliError::Threshold(format!(
            "conformance failures against {url}:\n{report}"
        )))
    }
}
