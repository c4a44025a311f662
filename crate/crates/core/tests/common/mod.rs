#![allow(dead_code)]

use rand::Rng;

/// AUC by O(n^2) pair counting, ties worth one half.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Random scored binary labels with both classes present; about half of the
/// cases use coarse scores so ties are common.
pub fn random_scored_case(rng: &mut impl Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..200);
    let coarse = rng.random_bool(0.5);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = labels
        .iter()
        .map(|&l| {
            let s = rng.random::<f64>() + if l { 0.3 } else { 0.0 };
            if coarse {
                (s * 8.0).floor() / 8.0
            } else {
                s
            }
        })
        .collect();
    (scores, labels)
}
