//! Sequence-level against token-level KL on randomly drawn models, plus
//! estimator behaviour under the batch refresh schedule.

use softpref::seqkl::{
    exact_sequence_kl, exact_tokenwise_kl, naive_kl_estimate, sample_sequences,
    staleness_bias_probe, tokenwise_kl_estimate, BatchMode, TokenModel,
};

#[test]
fn chain_rule_identity_holds_on_fifty_random_pairs() {
    for i in 0..50u64 {
        let max_len = 1 + (i as usize % 4);
        let theta = TokenModel::random(2, 3, max_len, 1_000 + i).unwrap();
        let reference = TokenModel::random(2, 3, max_len, 2_000 + i).unwrap();
        for query in 0..2 {
            let tokenwise = exact_tokenwise_kl(&theta, &reference, query).unwrap();
            let sequence = exact_sequence_kl(&theta, &reference, query).unwrap();
            assert!(
                (tokenwise - sequence).abs() <= 1e-10,
                "pair {i} query {query}: {tokenwise} vs {sequence}"
            );
        }
    }
}

#[test]
fn fresh_batch_estimates_average_to_the_exact_value() {
    let theta = TokenModel::random(1, 3, 3, 41).unwrap();
    let reference = TokenModel::random(1, 3, 3, 42).unwrap();
    let exact = exact_tokenwise_kl(&theta, &reference, 0).unwrap();

    let batches = 300usize;
    let mut estimates = Vec::with_capacity(batches);
    for b in 0..batches {
        let batch = sample_sequences(&theta, 0, 8, 7_000 + b as u64).unwrap();
        estimates.push(tokenwise_kl_estimate(&theta, &reference, &batch).unwrap());
    }
    let mean: f64 = estimates.iter().sum::<f64>() / batches as f64;
    let var: f64 = estimates
        .iter()
        .map(|e| (e - mean) * (e - mean))
        .sum::<f64>()
        / (batches - 1) as f64;
    let se = (var / batches as f64).sqrt();
    assert!(
        (mean - exact).abs() <= 4.0 * se,
        "mean {mean} exact {exact} se {se}"
    );
}

#[test]
fn tokenwise_estimator_beats_the_naive_one_on_variance() {
    let theta = TokenModel::random(1, 3, 3, 51).unwrap();
    let reference = TokenModel::random(1, 3, 3, 52).unwrap();

    let batches = 300usize;
    let mut tok = Vec::with_capacity(batches);
    let mut naive = Vec::with_capacity(batches);
    for b in 0..batches {
        let batch = sample_sequences(&theta, 0, 8, 9_000 + b as u64).unwrap();
        tok.push(tokenwise_kl_estimate(&theta, &reference, &batch).unwrap());
        naive.push(naive_kl_estimate(&theta, &reference, &batch).unwrap());
    }
    let variance = |xs: &[f64]| {
        let m: f64 = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
    };
    assert!(variance(&tok) < variance(&naive));
}

fn interpolated_trajectory(from: &TokenModel, to: &TokenModel, steps: usize) -> Vec<TokenModel> {
    (0..steps)
        .map(|t| blend(from, to, t as f64 / (steps - 1) as f64))
        .collect()
}

fn blend(a: &TokenModel, b: &TokenModel, lambda: f64) -> TokenModel {
    let mut text = String::new();
    text.push_str("tokenmodel v1\n");
    text.push_str(&format!("queries {}\n", a.num_queries()));
    text.push_str(&format!("alphabet {}\n", a.alphabet()));
    text.push_str(&format!("max_len {}\n", a.max_len()));
    for q in 0..a.num_queries() {
        for (prefix, dist_a) in a.table(q).unwrap() {
            let dist_b = b.next_token_dist(q, prefix).unwrap();
            let probs: Vec<String> = dist_a
                .probs()
                .iter()
                .zip(dist_b.probs())
                .map(|(pa, pb)| format!("{:.16e}", (1.0 - lambda) * pa + lambda * pb))
                .collect();
            let prefix_text = if prefix.is_empty() {
                "-".to_string()
            } else {
                prefix
                    .iter()
                    .map(|t| t.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            text.push_str(&format!("row {q} {prefix_text} : {}\n", probs.join(" ")));
        }
    }
    TokenModel::from_text(&text).unwrap()
}

#[test]
fn shorter_refresh_periods_shrink_the_worst_staleness_gap() {
    let from = TokenModel::random(1, 3, 2, 61).unwrap();
    let to = TokenModel::random(1, 3, 2, 62).unwrap();
    let reference = TokenModel::uniform(1, 3, 2).unwrap();
    let trajectory = interpolated_trajectory(&from, &to, 13);

    let worst = |period: usize| {
        let records =
            staleness_bias_probe(&trajectory, &reference, period, BatchMode::Exhaustive, 0)
                .unwrap();
        records
            .iter()
            .map(|r| r.gap.abs())
            .fold(0.0f64, f64::max)
    };
    let tight = worst(2);
    let loose = worst(4);
    assert!(tight < loose, "worst gap {tight} at period 2, {loose} at 4");
    assert!(loose > 0.0);
}

#[test]
fn refresh_steps_carry_no_staleness_gap() {
    let from = TokenModel::random(1, 3, 2, 71).unwrap();
    let to = TokenModel::random(1, 3, 2, 72).unwrap();
    let reference = TokenModel::uniform(1, 3, 2).unwrap();
    let trajectory = interpolated_trajectory(&from, &to, 9);

    let records =
        staleness_bias_probe(&trajectory, &reference, 4, BatchMode::Exhaustive, 0).unwrap();
    for record in &records {
        if record.refreshed {
            assert_eq!(record.gap, 0.0, "step {}", record.step);
            assert_eq!(record.estimate, record.exact_current_kl);
        }
    }
}
