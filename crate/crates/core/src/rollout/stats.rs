//! Batch statistics over trajectories: tool calls, hallucinations, turns,
//! terminations and rewards.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::trajectory::{Termination, Trajectory};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("no trajectories to summarize")]
    EmptyBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub chains: usize,
    pub total_tool_calls: usize,
    pub mean_tool_calls: f64,
    pub per_tool_calls: BTreeMap<String, usize>,
    pub invalid_calls: usize,
    pub hallucinations: usize,
    /// Invalid calls (any failure) over all calls.
    pub invalid_rate: f64,
    /// Calls naming an unknown tool or carrying bad arguments, over all
    /// calls.
    pub hallucination_rate: f64,
    pub mean_turns: f64,
    pub terminations: BTreeMap<String, usize>,
    pub mean_reward: f64,
    pub mean_tokens: f64,
    pub mean_response_tokens: f64,
}

fn termination_key(t: Termination) -> &'static str {
    match t {
        Termination::Natural => "natural",
        Termination::MaxTurns => "max_turns",
        Termination::Error => "error",
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn chain_stats(trajectories: &[Trajectory]) -> Result<ChainStats, StatsError> {
    if trajectories.is_empty() {
        return Err(StatsError::EmptyBatch);
    }
    let n = trajectories.len();
    let mut per_tool = BTreeMap::new();
    let mut terminations: BTreeMap<String, usize> = ["natural", "max_turns", "error"]
        .iter()
        .map(|k| (k.to_string(), 0))
        .collect();
    let (mut calls, mut invalid, mut halluc, mut turns, mut tokens, mut resp_tokens) = (0, 0, 0, 0, 0, 0);
    let mut reward = 0.0;
    for t in trajectories {
        for c in &t.tool_calls {
            *per_tool.entry(c.name.clone()).or_insert(0) += 1;
            calls += 1;
            invalid += usize::from(!c.valid);
            halluc += usize::from(c.is_hallucination());
        }
        turns += t.turns();
        tokens += t.token_count();
        resp_tokens += t.response_token_count();
        reward += t.reward;
        *terminations
            .entry(termination_key(t.terminated).to_string())
            .or_insert(0) += 1;
    }
    Ok(ChainStats {
        chains: n,
        total_tool_calls: calls,
        mean_tool_calls: ratio(calls, n),
        per_tool_calls: per_tool,
        invalid_calls: invalid,
        hallucinations: halluc,
        invalid_rate: ratio(invalid, calls),
        hallucination_rate: ratio(halluc, calls),
        mean_turns: ratio(turns, n),
        terminations,
        mean_reward: reward / n as f64,
        mean_tokens: ratio(tokens, n),
        mean_response_tokens: ratio(resp_tokens, n),
    })
}

/// Splits a concatenation of batch files into batches: a batch ends where a
/// chain ID reappears.
pub fn split_batches(trajectories: &[Trajectory]) -> Vec<&[Trajectory]> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut start = 0;
    for (i, t) in trajectories.iter().enumerate() {
        if !seen.insert(t.chain_id.as_str()) {
            out.push(&trajectories[start..i]);
            seen.clear();
            seen.insert(t.chain_id.as_str());
            start = i;
        }
    }
    if start < trajectories.len() {
        out.push(&trajectories[start..]);
    }
    out
}

/// One row of the per-step curve: a batch's headline numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub chains: usize,
    pub mean_reward: f64,
    pub mean_turns: f64,
    pub mean_tool_calls: f64,
    pub hallucination_rate: f64,
    pub per_tool_calls: BTreeMap<String, usize>,
}

pub fn curve_rows(trajectories: &[Trajectory]) -> Result<Vec<CurveRow>, StatsError> {
    if trajectories.is_empty() {
        return Err(StatsError::EmptyBatch);
    }
    split_batches(trajectories)
        .into_iter()
        .enumerate()
        .map(|(step, batch)| {
            let s = chain_stats(batch)?;
            Ok(CurveRow {
                step,
                chains: s.chains,
                mean_reward: s.mean_reward,
                mean_turns: s.mean_turns,
                mean_tool_calls: s.mean_tool_calls,
                hallucination_rate: s.hallucination_rate,
                per_tool_calls: s.per_tool_calls,
            })
        })
        .collect()
}

/// Header and rows for the curve CSV; per-tool columns cover every tool
/// seen in any batch.
pub fn curve_table(rows: &[CurveRow]) -> (Vec<String>, Vec<Vec<String>>) {
    let tools: BTreeSet<&String> = rows.iter().flat_map(|r| r.per_tool_calls.keys()).collect();
    let mut header: Vec<String> = [
        "step",
        "chains",
        "mean_reward",
        "mean_turns",
        "mean_tool_calls",
        "hallucination_rate",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(tools.iter().map(|t| format!("calls_{t}")));
    let body = rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.step.to_string(),
                r.chains.to_string(),
                r.mean_reward.to_string(),
                r.mean_turns.to_string(),
                r.mean_tool_calls.to_string(),
                r.hallucination_rate.to_string(),
            ];
            row.extend(
                tools
                    .iter()
                    .map(|t| r.per_tool_calls.get(*t).copied().unwrap_or(0).to_string()),
            );
            row
        })
        .collect();
    (header, body)
}
