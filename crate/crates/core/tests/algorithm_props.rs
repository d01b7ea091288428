use std::collections::BTreeMap;

use chainforge::algorithms::{
    compute_advantages, grpo_advantages, ppo_clip_loss, ppo_clip_loss_grad, reinforcepp_advantages,
    rloo_advantages, AdvantageBatch, AlgoConfig, AlgoError, Algorithm, TokenInputs,
};
use chainforge::trajectory::MaskedRow;
use proptest::prelude::*;

/// A batch of 2..8 rows in groups of at least two, each row with at least
/// one masked token.
fn batch() -> impl Strategy<Value = (Vec<MaskedRow>, Vec<f64>)> {
    (1usize..4, 2usize..4).prop_flat_map(|(groups, per)| {
        let n = groups * per;
        (
            prop::collection::vec(prop::collection::vec(0u8..2, 1..16), n),
            prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), -2.0f64..2.0], n),
        )
            .prop_map(move |(mut masks, rewards)| {
                let rows = masks
                    .iter_mut()
                    .enumerate()
                    .map(|(i, m)| {
                        if !m.contains(&1) {
                            let last = m.len() - 1;
                            m[last] = 1;
                        }
                        MaskedRow {
                            token_ids: vec![0; m.len()],
                            mask: m.clone(),
                            group_index: i / per,
                        }
                    })
                    .collect();
                (rows, rewards)
            })
    })
}

fn token_noise(rows: &[MaskedRow], seed: f64) -> Vec<Vec<f64>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            (0..r.mask.len())
                .map(|t| ((i * 31 + t * 7) as f64 * 0.37 + seed).sin() * 0.5 - 1.0)
                .collect()
        })
        .collect()
}

fn all_algorithms() -> [Algorithm; 4] {
    [
        Algorithm::Grpo,
        Algorithm::Rloo,
        Algorithm::ReinforcePp,
        Algorithm::Ppo,
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn advantages_vanish_off_mask((rows, rewards) in batch()) {
        let values = token_noise(&rows, 0.3);
        let old = token_noise(&rows, 1.1);
        let reference = token_noise(&rows, 2.9);
        for algorithm in all_algorithms() {
            let cfg = AlgoConfig { algorithm, kl_coeff: 0.05, gamma: 0.97, lambda: 0.9, ..AlgoConfig::default() };
            let inputs = TokenInputs { values: Some(&values), old_logprobs: Some(&old), ref_logprobs: Some(&reference) };
            let b = compute_advantages(&cfg, &rows, &rewards, &inputs).unwrap();
            for (adv, row) in b.advantages.iter().zip(&rows) {
                prop_assert_eq!(adv.len(), row.mask.len());
                for (a, &m) in adv.iter().zip(&row.mask) {
                    prop_assert!(a.is_finite());
                    if m == 0 {
                        prop_assert_eq!(*a, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn group_estimators_center_each_group((rows, rewards) in batch()) {
        let groups: Vec<usize> = rows.iter().map(|r| r.group_index).collect();
        let g = grpo_advantages(&rewards, &groups, 1e-6).unwrap();
        let l = rloo_advantages(&rewards, &groups).unwrap();
        let mut sums: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for i in 0..rewards.len() {
            let e = sums.entry(groups[i]).or_default();
            e.0 += g[i];
            e.1 += l[i];
        }
        for (gs, ls) in sums.values() {
            prop_assert!(gs.abs() < 1e-9);
            prop_assert!(ls.abs() < 1e-9);
        }
        // Both preserve the within-group reward order.
        for i in 0..rewards.len() {
            for j in 0..rewards.len() {
                if groups[i] == groups[j] && rewards[i] > rewards[j] {
                    prop_assert!(g[i] > g[j]);
                    prop_assert!(l[i] > l[j]);
                }
            }
        }
    }

    #[test]
    fn reinforcepp_is_whitened((rows, rewards) in batch(), gamma in 0.5f64..=1.0) {
        let masks: Vec<Vec<u8>> = rows.iter().map(|r| r.mask.clone()).collect();
        let a = reinforcepp_advantages(&rewards, &masks, gamma, 1e-8, None).unwrap();
        let vals: Vec<f64> = a.iter().zip(&masks)
            .flat_map(|(r, m)| r.iter().zip(m).filter(|(_, &b)| b == 1).map(|(v, _)| *v))
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(var < 1.0 + 1e-6);
        prop_assert!(var.abs() < 1e-12 || (var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn ppo_at_identity_ratio_is_negative_mean_advantage((rows, rewards) in batch()) {
        let masks: Vec<Vec<u8>> = rows.iter().map(|r| r.mask.clone()).collect();
        let adv = reinforcepp_advantages(&rewards, &masks, 1.0, 1e-8, None).unwrap();
        let b = AdvantageBatch {
            advantages: adv,
            mask: masks.clone(),
            rewards: rewards.clone(),
            group_index: rows.iter().map(|r| r.group_index).collect(),
        };
        let lp = token_noise(&rows, 0.7);
        let loss = ppo_clip_loss(&lp, &lp, &b, 0.2).unwrap();
        let (mut sum, mut count) = (0.0, 0usize);
        for (a, m) in b.advantages.iter().zip(&masks) {
            for (v, &bit) in a.iter().zip(m) {
                if bit == 1 {
                    sum += v;
                    count += 1;
                }
            }
        }
        prop_assert_eq!(loss.masked_tokens, count);
        prop_assert!((loss.loss + sum / count as f64).abs() < 1e-12);
        let grad = ppo_clip_loss_grad(&lp, &lp, &b, 0.2).unwrap();
        for ((g, a), m) in grad.iter().zip(&b.advantages).zip(&masks) {
            for t in 0..m.len() {
                let expect = if m[t] == 1 { -a[t] / count as f64 } else { 0.0 };
                prop_assert!((g[t] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn hand_checked_values() {
    // Group of four with rewards 1, 0, 0, 1: mean 0.5, population std 0.5.
    let g = grpo_advantages(&[1.0, 0.0, 0.0, 1.0], &[0; 4], 0.0).unwrap();
    assert_eq!(g, vec![1.0, -1.0, -1.0, 1.0]);
    let l = rloo_advantages(&[1.0, 0.0, 0.0, 1.0], &[0; 4]).unwrap();
    let third = 1.0 / 3.0;
    for (a, e) in l
        .iter()
        .zip([1.0 - third, -2.0 * third, -2.0 * third, 1.0 - third])
    {
        assert!((a - e).abs() < 1e-15);
    }
    assert_eq!(
        grpo_advantages(&[0.5, 0.5], &[0, 0], 1e-6).unwrap(),
        vec![0.0, 0.0]
    );
    assert_eq!(
        rloo_advantages(&[1.0], &[0]),
        Err(AlgoError::GroupTooSmall { group: 0, size: 1 })
    );

    // One token: ratio 0.8/0.5 = 1.6 clips to 1.2, loss -1.2.
    let b = AdvantageBatch {
        advantages: vec![vec![1.0]],
        mask: vec![vec![1]],
        rewards: vec![1.0],
        group_index: vec![0],
    };
    let loss = ppo_clip_loss(&[vec![0.8f64.ln()]], &[vec![0.5f64.ln()]], &b, 0.2).unwrap();
    assert!((loss.loss + 1.2).abs() < 1e-12, "{}", loss.loss);
}
