use super::{check_aligned, AlgoError};

/// Generalized advantage estimation over the masked positions of one
/// sequence.
///
/// Unmasked positions are transparent: the recursion steps from one masked
/// token directly to the next, and their rewards and values are ignored. The
/// value after the last masked token is zero.
pub fn gae_advantages(
    rewards: &[f64],
    values: &[f64],
    mask: &[u8],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>, AlgoError> {
    if rewards.len() != mask.len() || values.len() != mask.len() {
        return Err(AlgoError::ShapeError(format!(
            "rewards {}, values {}, mask {}",
            rewards.len(),
            values.len(),
            mask.len()
        )));
    }
    let mut out = vec![0.0; mask.len()];
    let mut next_value = 0.0;
    let mut next_adv = 0.0;
    for t in (0..mask.len()).rev() {
        if mask[t] != 1 {
            continue;
        }
        if !rewards[t].is_finite() || !values[t].is_finite() {
            return Err(AlgoError::NumericalError(format!(
                "non-finite reward or value at token {t}"
            )));
        }
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        out[t] = next_adv;
        next_value = values[t];
    }
    Ok(out)
}

pub fn gae_batch(
    rewards: &[Vec<f64>],
    values: &[Vec<f64>],
    masks: &[Vec<u8>],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<Vec<f64>>, AlgoError> {
    check_aligned("rewards", rewards, masks)?;
    check_aligned("values", values, masks)?;
    rewards
        .iter()
        .zip(values)
        .zip(masks)
        .map(|((r, v), m)| gae_advantages(r, v, m, gamma, lambda))
        .collect()
}
