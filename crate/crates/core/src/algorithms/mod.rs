//! Masked advantage estimators and the clipped policy loss.
//!
//! Every estimator returns per-token advantages that are exactly zero where
//! the mask is zero, and never reads inputs at those positions.

mod gae;
mod group;
mod ppo;
mod reinforce;

pub use gae::{gae_advantages, gae_batch};
pub use group::{grpo_advantages, rloo_advantages};
pub use ppo::{ppo_clip_loss, ppo_clip_loss_grad, PpoLoss};
pub use reinforce::{reinforcepp_advantages, KlPenalty};

use serde::{Deserialize, Serialize};

use crate::trajectory::MaskedRow;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AlgoError {
    #[error("group {group} has {size} member(s); at least 2 are required")]
    GroupTooSmall { group: usize, size: usize },
    #[error("batch has {0} trajectory(ies); at least 2 are required")]
    BatchTooSmall(usize),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("numerical error: {0}")]
    NumericalError(String),
    #[error("mask selects no tokens")]
    EmptyMask,
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ppo,
    Grpo,
    Rloo,
    #[serde(rename = "reinforce_pp", alias = "reinforce++")]
    ReinforcePp,
}

impl Algorithm {
    pub fn is_group_based(self) -> bool {
        matches!(self, Algorithm::Grpo | Algorithm::Rloo)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = AlgoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ppo" => Ok(Algorithm::Ppo),
            "grpo" => Ok(Algorithm::Grpo),
            "rloo" => Ok(Algorithm::Rloo),
            "reinforce_pp" | "reinforce++" | "reinforcepp" => Ok(Algorithm::ReinforcePp),
            other => Err(AlgoError::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Ppo => "ppo",
            Algorithm::Grpo => "grpo",
            Algorithm::Rloo => "rloo",
            Algorithm::ReinforcePp => "reinforce_pp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlgoConfig {
    pub algorithm: Algorithm,
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub std_epsilon: f64,
    pub kl_coeff: f64,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Grpo,
            clip_epsilon: 0.2,
            gamma: 1.0,
            lambda: 1.0,
            std_epsilon: 1e-6,
            kl_coeff: 0.0,
        }
    }
}

impl AlgoConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), AlgoError> {
        let bad = |m: &str| Err(AlgoError::Config(m.to_string()));
        if !(self.clip_epsilon > 0.0) {
            return bad("clip_epsilon must be > 0");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must be in [0, 1]");
        }
        if !(self.std_epsilon > 0.0) {
            return bad("std_epsilon must be > 0");
        }
        if !(self.kl_coeff >= 0.0) {
            return bad("kl_coeff must be >= 0");
        }
        Ok(())
    }
}

/// Per-token advantages for a batch of trajectories, aligned with their masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageBatch {
    pub advantages: Vec<Vec<f64>>,
    pub mask: Vec<Vec<u8>>,
    pub rewards: Vec<f64>,
    pub group_index: Vec<usize>,
}

impl AdvantageBatch {
    pub fn masked_token_count(&self) -> usize {
        self.mask
            .iter()
            .map(|m| m.iter().filter(|&&b| b == 1).count())
            .sum()
    }
}

/// Caller-supplied per-token streams that some algorithms need.
#[derive(Debug, Clone, Default)]
pub struct TokenInputs<'a> {
    /// Critic values, required for PPO.
    pub values: Option<&'a [Vec<f64>]>,
    /// Behaviour-policy log-probabilities, used by the REINFORCE++ KL term.
    pub old_logprobs: Option<&'a [Vec<f64>]>,
    /// Reference-policy log-probabilities, used by the REINFORCE++ KL term.
    pub ref_logprobs: Option<&'a [Vec<f64>]>,
}

/// Sum of `values` where the mask is set, divided by the number of set
/// positions.
pub fn masked_mean(values: &[f64], mask: &[u8]) -> Result<f64, AlgoError> {
    if values.len() != mask.len() {
        return Err(AlgoError::ShapeError(format!(
            "{} values vs {} mask entries",
            values.len(),
            mask.len()
        )));
    }
    let (sum, count) = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == 1)
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
    if count == 0 {
        return Err(AlgoError::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Copies each trajectory's scalar advantage onto its masked tokens.
pub fn broadcast_to_tokens(scalars: &[f64], masks: &[Vec<u8>]) -> Vec<Vec<f64>> {
    scalars
        .iter()
        .zip(masks)
        .map(|(&a, m)| m.iter().map(|&b| if b == 1 { a } else { 0.0 }).collect())
        .collect()
}

pub(crate) fn check_aligned(name: &str, a: &[Vec<f64>], masks: &[Vec<u8>]) -> Result<(), AlgoError> {
    if a.len() != masks.len() {
        return Err(AlgoError::ShapeError(format!(
            "{name}: {} rows vs {} masks",
            a.len(),
            masks.len()
        )));
    }
    for (i, (row, m)) in a.iter().zip(masks).enumerate() {
        if row.len() != m.len() {
            return Err(AlgoError::ShapeError(format!(
                "{name}: row {i} has {} entries vs mask length {}",
                row.len(),
                m.len()
            )));
        }
    }
    Ok(())
}

/// Runs the configured estimator over a masked batch.
///
/// PPO places each trajectory's reward on its last masked token and runs GAE
/// against the supplied critic values.
pub fn compute_advantages(
    config: &AlgoConfig,
    rows: &[MaskedRow],
    rewards: &[f64],
    inputs: &TokenInputs<'_>,
) -> Result<AdvantageBatch, AlgoError> {
    if rows.len() != rewards.len() {
        return Err(AlgoError::ShapeError(format!(
            "{} rows vs {} rewards",
            rows.len(),
            rewards.len()
        )));
    }
    let masks: Vec<Vec<u8>> = rows.iter().map(|r| r.mask.clone()).collect();
    let groups: Vec<usize> = rows.iter().map(|r| r.group_index).collect();
    let advantages = match config.algorithm {
        Algorithm::Grpo => {
            let a = grpo_advantages(rewards, &groups, config.std_epsilon)?;
            broadcast_to_tokens(&a, &masks)
        }
        Algorithm::Rloo => {
            let a = rloo_advantages(rewards, &groups)?;
            broadcast_to_tokens(&a, &masks)
        }
        Algorithm::ReinforcePp => {
            let kl = match (inputs.old_logprobs, inputs.ref_logprobs) {
                (Some(old), Some(reference)) if config.kl_coeff > 0.0 => Some(KlPenalty {
                    coeff: config.kl_coeff,
                    old_logprobs: old,
                    ref_logprobs: reference,
                }),
                _ => None,
            };
            reinforcepp_advantages(rewards, &masks, config.gamma, config.std_epsilon, kl)?
        }
        Algorithm::Ppo => {
            let values = inputs
                .values
                .ok_or_else(|| AlgoError::ShapeError("PPO requires per-token critic values".into()))?;
            check_aligned("values", values, &masks)?;
            let token_rewards: Vec<Vec<f64>> = masks
                .iter()
                .zip(rewards)
                .map(|(m, &r)| terminal_reward_row(m, r))
                .collect();
            gae_batch(&token_rewards, values, &masks, config.gamma, config.lambda)?
        }
    };
    Ok(AdvantageBatch {
        advantages,
        mask: masks,
        rewards: rewards.to_vec(),
        group_index: groups,
    })
}

/// Zero everywhere except `reward` on the last masked position.
pub fn terminal_reward_row(mask: &[u8], reward: f64) -> Vec<f64> {
    let mut row = vec![0.0; mask.len()];
    if let Some(last) = mask.iter().rposition(|&m| m == 1) {
        row[last] = reward;
    }
    row
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_mean_basic() {
        assert_eq!(masked_mean(&[1.0, 2.0, 3.0], &[1, 0, 1]).unwrap(), 2.0);
        assert_eq!(masked_mean(&[1.0, 2.0, 6.0], &[1, 1, 1]).unwrap(), 3.0);
        assert_eq!(masked_mean(&[1.0, 2.0], &[0, 0]), Err(AlgoError::EmptyMask));
        assert!(matches!(
            masked_mean(&[1.0], &[1, 1]),
            Err(AlgoError::ShapeError(_))
        ));
    }

    #[test]
    fn broadcast_zeroes_off_mask() {
        let out = broadcast_to_tokens(&[2.0, -1.0], &[vec![0, 1, 1], vec![1, 0]]);
        assert_eq!(out, vec![vec![0.0, 2.0, 2.0], vec![-1.0, 0.0]]);
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in [
            Algorithm::Ppo,
            Algorithm::Grpo,
            Algorithm::Rloo,
            Algorithm::ReinforcePp,
        ] {
            assert_eq!(a.to_string().parse::<Algorithm>().unwrap(), a);
        }
        assert_eq!(
            "REINFORCE++".parse::<Algorithm>().unwrap(),
            Algorithm::ReinforcePp
        );
        assert!("sac".parse::<Algorithm>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AlgoConfig::default().validate().is_ok());
        let bad = AlgoConfig {
            gamma: 0.0,
            ..AlgoConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AlgoConfig {
            lambda: 1.5,
            ..AlgoConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ppo_dispatch_requires_values() {
        let rows = vec![MaskedRow {
            token_ids: vec![1, 2],
            mask: vec![0, 1],
            group_index: 0,
        }];
        let cfg = AlgoConfig {
            algorithm: Algorithm::Ppo,
            ..AlgoConfig::default()
        };
        assert!(compute_advantages(&cfg, &rows, &[1.0], &TokenInputs::default()).is_err());
        let values = vec![vec![0.0, 0.0]];
        let out = compute_advantages(
            &cfg,
            &rows,
            &[1.0],
            &TokenInputs {
                values: Some(&values),
                ..TokenInputs::default()
            },
        )
        .unwrap();
        assert_eq!(out.advantages, vec![vec![0.0, 1.0]]);
    }
}
