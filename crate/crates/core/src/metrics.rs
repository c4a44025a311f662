use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of predictions equal to the truth.
pub fn accuracy(predicted: &[bool], truth: &[bool]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::Metric("accuracy of an empty set".into()));
    }
    if predicted.len() != truth.len() {
        return Err(Error::Shape {
            context: "accuracy",
            expected: vec![truth.len()],
            found: vec![predicted.len()],
        });
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// ROC AUC as the Mann-Whitney statistic: the probability that a random
/// positive scores above a random negative, ties counting one half.
/// Computed from average ranks in `O(n log n)`.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape {
            context: "auc",
            expected: vec![positive.len()],
            found: vec![scores.len()],
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("auc scores contain NaN".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!(
            "auc needs both classes (positives {n_pos}, negatives {n_neg})"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tie group shares the mean of its ranks
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Evaluation summary written next to checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub samples: usize,
    pub acc: f64,
    pub auc: f64,
    pub loss_classification: f64,
    pub loss_total: f64,
    pub ssim: Option<f64>,
    pub loss_ssim: Option<f64>,
    pub loss_patch_mse: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
}
