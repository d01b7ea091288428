use super::{check_aligned, AlgoError};

/// Optional KL shaping for REINFORCE++: `coeff * (old - ref)` is subtracted
/// from the reward of every masked token.
#[derive(Debug, Clone, Copy)]
pub struct KlPenalty<'a> {
    pub coeff: f64,
    pub old_logprobs: &'a [Vec<f64>],
    pub ref_logprobs: &'a [Vec<f64>],
}

/// Batch-whitened discounted returns.
///
/// Each masked token's return is the sum of later masked-token rewards,
/// discounted by `gamma` per masked token of distance; the terminal reward
/// sits on the last masked token. Returns are then whitened with the mean and
/// population standard deviation over every masked token in the batch.
pub fn reinforcepp_advantages(
    rewards: &[f64],
    masks: &[Vec<u8>],
    gamma: f64,
    std_epsilon: f64,
    kl: Option<KlPenalty<'_>>,
) -> Result<Vec<Vec<f64>>, AlgoError> {
    if rewards.len() != masks.len() {
        return Err(AlgoError::ShapeError(format!(
            "{} rewards vs {} masks",
            rewards.len(),
            masks.len()
        )));
    }
    if rewards.len() < 2 {
        return Err(AlgoError::BatchTooSmall(rewards.len()));
    }
    if let Some(kl) = &kl {
        check_aligned("old_logprobs", kl.old_logprobs, masks)?;
        check_aligned("ref_logprobs", kl.ref_logprobs, masks)?;
    }

    let mut returns: Vec<Vec<f64>> = Vec::with_capacity(masks.len());
    for (i, mask) in masks.iter().enumerate() {
        let mut row = vec![0.0; mask.len()];
        let last = mask.iter().rposition(|&m| m == 1);
        let mut running = 0.0;
        for t in (0..mask.len()).rev() {
            if mask[t] != 1 {
                continue;
            }
            let mut r = if Some(t) == last { rewards[i] } else { 0.0 };
            if let Some(kl) = &kl {
                let (old, reference) = (kl.old_logprobs[i][t], kl.ref_logprobs[i][t]);
                if !old.is_finite() || !reference.is_finite() {
                    return Err(AlgoError::NumericalError(format!(
                        "non-finite logprob at row {i}, token {t}"
                    )));
                }
                r -= kl.coeff * (old - reference);
            }
            running = r + gamma * running;
            row[t] = running;
        }
        returns.push(row);
    }

    let masked: Vec<f64> = returns
        .iter()
        .zip(masks)
        .flat_map(|(row, m)| row.iter().zip(m).filter(|(_, &b)| b == 1).map(|(v, _)| *v))
        .collect();
    if masked.is_empty() {
        return Err(AlgoError::EmptyMask);
    }
    if masked.iter().any(|v| !v.is_finite()) {
        return Err(AlgoError::NumericalError("non-finite return".into()));
    }
    if masked.iter().all(|&v| v == masked[0]) {
        return Ok(masks.iter().map(|m| vec![0.0; m.len()]).collect());
    }
    let n = masked.len() as f64;
    let mean = masked.iter().sum::<f64>() / n;
    let std = (masked.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let denom = std + std_epsilon;
    for (row, m) in returns.iter_mut().zip(masks) {
        for (v, &b) in row.iter_mut().zip(m) {
            *v = if b == 1 { (*v - mean) / denom } else { 0.0 };
        }
    }
    Ok(returns)
}
