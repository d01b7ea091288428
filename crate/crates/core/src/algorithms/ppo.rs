use super::{check_aligned, AdvantageBatch, AlgoError};

#[derive(Debug, Clone, PartialEq)]
pub struct PpoLoss {
    pub loss: f64,
    /// Unnormalized per-token terms; zero off-mask.
    pub per_token: Vec<Vec<f64>>,
    pub masked_tokens: usize,
}

fn validate(
    new_logprobs: &[Vec<f64>],
    old_logprobs: &[Vec<f64>],
    batch: &AdvantageBatch,
) -> Result<usize, AlgoError> {
    check_aligned("new_logprobs", new_logprobs, &batch.mask)?;
    check_aligned("old_logprobs", old_logprobs, &batch.mask)?;
    check_aligned("advantages", &batch.advantages, &batch.mask)?;
    let mut count = 0;
    for (i, m) in batch.mask.iter().enumerate() {
        for (t, &b) in m.iter().enumerate() {
            if b != 1 {
                continue;
            }
            count += 1;
            if !new_logprobs[i][t].is_finite() || !old_logprobs[i][t].is_finite() {
                return Err(AlgoError::NumericalError(format!(
                    "non-finite logprob at row {i}, token {t}"
                )));
            }
        }
    }
    if count == 0 {
        return Err(AlgoError::EmptyMask);
    }
    Ok(count)
}

/// Clipped surrogate loss, normalized by the number of masked tokens in the
/// whole batch.
pub fn ppo_clip_loss(
    new_logprobs: &[Vec<f64>],
    old_logprobs: &[Vec<f64>],
    batch: &AdvantageBatch,
    clip_epsilon: f64,
) -> Result<PpoLoss, AlgoError> {
    let count = validate(new_logprobs, old_logprobs, batch)?;
    let mut total = 0.0;
    let mut per_token = Vec::with_capacity(batch.mask.len());
    for (i, m) in batch.mask.iter().enumerate() {
        let mut row = vec![0.0; m.len()];
        for (t, &b) in m.iter().enumerate() {
            if b != 1 {
                continue;
            }
            let adv = batch.advantages[i][t];
            let ratio = (new_logprobs[i][t] - old_logprobs[i][t]).exp();
            let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
            let term = -(ratio * adv).min(clipped * adv);
            row[t] = term;
            total += term;
        }
        per_token.push(row);
    }
    Ok(PpoLoss {
        loss: total / count as f64,
        per_token,
        masked_tokens: count,
    })
}

/// Analytic gradient of [`ppo_clip_loss`] with respect to `new_logprobs`.
/// Tokens on the clipped branch have zero gradient.
pub fn ppo_clip_loss_grad(
    new_logprobs: &[Vec<f64>],
    old_logprobs: &[Vec<f64>],
    batch: &AdvantageBatch,
    clip_epsilon: f64,
) -> Result<Vec<Vec<f64>>, AlgoError> {
    let count = validate(new_logprobs, old_logprobs, batch)? as f64;
    Ok(batch
        .mask
        .iter()
        .enumerate()
        .map(|(i, m)| {
            m.iter()
                .enumerate()
                .map(|(t, &b)| {
                    if b != 1 {
                        return 0.0;
                    }
                    let adv = batch.advantages[i][t];
                    let ratio = (new_logprobs[i][t] - old_logprobs[i][t]).exp();
                    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
                    if ratio * adv <= clipped * adv {
                        -ratio * adv / count
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(adv: Vec<Vec<f64>>, mask: Vec<Vec<u8>>) -> AdvantageBatch {
        let n = adv.len();
        AdvantageBatch {
            advantages: adv,
            mask,
            rewards: vec![0.0; n],
            group_index: vec![0; n],
        }
    }

    #[test]
    fn clip_branch_hand_example() {
        let b = batch(vec![vec![1.0]], vec![vec![1]]);
        let out = ppo_clip_loss(&[vec![0.8f64.ln()]], &[vec![0.5f64.ln()]], &b, 0.2).unwrap();
        assert!((out.loss + 1.2).abs() < 1e-12, "{}", out.loss);
    }

    #[test]
    fn ratio_one_collapses_to_mean_advantage() {
        let b = batch(
            vec![vec![0.0, 2.0, 4.0], vec![-1.0, 0.0]],
            vec![vec![0, 1, 1], vec![1, 0]],
        );
        let lp = vec![vec![-0.3, -0.7, -1.1], vec![-2.0, -0.1]];
        let out = ppo_clip_loss(&lp, &lp, &b, 0.2).unwrap();
        assert!((out.loss + (2.0 + 4.0 - 1.0) / 3.0).abs() < 1e-15);
        assert_eq!(out.masked_tokens, 3);
    }

    #[test]
    fn zero_advantage_zero_loss() {
        let b = batch(vec![vec![0.0; 3]], vec![vec![1, 1, 1]]);
        let out = ppo_clip_loss(&[vec![-0.1, -0.2, -0.3]], &[vec![-1.0; 3]], &b, 0.2).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn non_finite_masked_logprob_errors_but_off_mask_does_not() {
        let b = batch(vec![vec![0.0, 1.0]], vec![vec![0, 1]]);
        let ok = ppo_clip_loss(&[vec![f64::NAN, -0.1]], &[vec![0.0, -0.2]], &b, 0.2);
        assert!(ok.is_ok());
        let bad = ppo_clip_loss(&[vec![0.0, f64::INFINITY]], &[vec![0.0, -0.2]], &b, 0.2);
        assert!(matches!(bad, Err(AlgoError::NumericalError(_))));
    }

    #[test]
    fn empty_mask_errors() {
        let b = batch(vec![vec![0.0]], vec![vec![0]]);
        assert_eq!(
            ppo_clip_loss(&[vec![0.0]], &[vec![0.0]], &b, 0.2),
            Err(AlgoError::EmptyMask)
        );
    }
}
