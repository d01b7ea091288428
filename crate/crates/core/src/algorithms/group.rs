use std::collections::BTreeMap;

use super::AlgoError;

fn members(rewards: &[f64], groups: &[usize]) -> Result<BTreeMap<usize, Vec<usize>>, AlgoError> {
    if rewards.len() != groups.len() {
        return Err(AlgoError::ShapeError(format!(
            "{} rewards vs {} group indices",
            rewards.len(),
            groups.len()
        )));
    }
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(AlgoError::NumericalError(format!("reward {r} is not finite")));
    }
    let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        by_group.entry(g).or_default().push(i);
    }
    for (&group, idx) in &by_group {
        if idx.len() < 2 {
            return Err(AlgoError::GroupTooSmall {
                group,
                size: idx.len(),
            });
        }
    }
    Ok(by_group)
}

/// Group-normalized advantage: `(r - mean) / (std + std_epsilon)` with the
/// population standard deviation of the query's group. Groups whose rewards
/// are all equal get zero advantage.
pub fn grpo_advantages(rewards: &[f64], groups: &[usize], std_epsilon: f64) -> Result<Vec<f64>, AlgoError> {
    let by_group = members(rewards, groups)?;
    let mut out = vec![0.0; rewards.len()];
    for idx in by_group.values() {
        let first = rewards[idx[0]];
        if idx.iter().all(|&i| rewards[i] == first) {
            continue;
        }
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| rewards[i]).sum::<f64>() / n;
        let var = idx.iter().map(|&i| (rewards[i] - mean).powi(2)).sum::<f64>() / n;
        let denom = var.sqrt() + std_epsilon;
        for &i in idx {
            out[i] = (rewards[i] - mean) / denom;
        }
    }
    Ok(out)
}

/// Leave-one-out advantage: each reward minus the mean of the other members
/// of its group.
pub fn rloo_advantages(rewards: &[f64], groups: &[usize]) -> Result<Vec<f64>, AlgoError> {
    let by_group = members(rewards, groups)?;
    let mut out = vec![0.0; rewards.len()];
    for idx in by_group.values() {
        let first = rewards[idx[0]];
        if idx.iter().all(|&i| rewards[i] == first) {
            continue;
        }
        let total: f64 = idx.iter().map(|&i| rewards[i]).sum();
        let others = (idx.len() - 1) as f64;
        for &i in idx {
            out[i] = rewards[i] - (total - rewards[i]) / others;
        }
    }
    Ok(out)
}
