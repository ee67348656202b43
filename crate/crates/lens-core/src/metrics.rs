//! Evaluation metrics: tie-aware AUC (normalised Mann-Whitney statistic) and
//! log loss computed from logits.

use crate::error::{CoreError, Result};

/// Tie-aware AUC: ties contribute half a concordant pair. Computed from
/// average ranks in O(N log N).
pub fn evaluate_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] > 0.5 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean negative log-likelihood from logits (stable for saturated logits).
pub fn logloss_from_logits(logits: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(logits.len(), labels.len());
    let n = logits.len().max(1) as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// O(N^2) pairwise oracle: P(score_pos > score_neg) + 0.5 P(tie).
    fn auc_pairwise(scores: &[f64], labels: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] <= 0.5 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] > 0.5 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfect_separation_is_one() {
        let auc = evaluate_auc(&[0.9, 0.1], &[1.0, 0.0]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn all_ties_score_half() {
        let auc = evaluate_auc(&[0.3; 6], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((auc - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(evaluate_auc(&[0.1, 0.2], &[1.0, 1.0]), Err(CoreError::AucUndefined)));
    }

    #[test]
    fn matches_pairwise_oracle_with_ties() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for trial in 0..30 {
            let n = 50 + (trial * 15) % 450;
            // Coarse score grid forces plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
            let labels: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.3))).collect();
            if labels.iter().all(|&y| y > 0.5) || labels.iter().all(|&y| y < 0.5) {
                continue;
            }
            let fast = evaluate_auc(&scores, &labels).unwrap();
            let slow = auc_pairwise(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "trial {trial}: {fast} vs {slow}");
        }
    }

    #[test]
    fn logloss_analytic_values() {
        assert!((logloss_from_logits(&[0.0], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-12);
        let saturated = logloss_from_logits(&[50.0], &[1.0]);
        assert!(saturated >= 0.0 && saturated <= 1e-20);
        assert!(logloss_from_logits(&[-50.0], &[0.0]) <= 1e-20);
    }

    #[test]
    fn logloss_matches_direct_formula_on_random_batch() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let logits: Vec<f64> = (0..200).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let labels: Vec<f64> = (0..200).map(|_| f64::from(rng.gen_bool(0.4))).collect();
        let stable = logloss_from_logits(&logits, &labels);
        let direct: f64 = logits
            .iter()
            .zip(&labels)
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 200.0;
        assert!((stable - direct).abs() < 1e-12);
    }
}
