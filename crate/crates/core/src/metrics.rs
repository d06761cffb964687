//! ROC AUC and seed aggregation.

use crate::error::{Error, Result};

/// Rank-sum (Mann–Whitney) AUC with ties counted half.
///
/// Ranks are kept doubled so every intermediate value is an integer and
/// the result equals the pairwise count divided by `P·N` exactly.
pub fn compute_auc(scores: &[f64], anomaly: &[bool]) -> Result<f64> {
    if scores.len() != anomaly.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} flags",
            scores.len(),
            anomaly.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Contract(format!("score {i} is NaN")));
    }
    let pos = anomaly.iter().filter(|&&f| f).count() as u128;
    let neg = anomaly.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} anomalous and {neg} normal"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut doubled_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Positions start+1..=end share the average rank (start+1+end)/2.
        let doubled = (start + 1 + end) as u128;
        let positives = order[start..end].iter().filter(|&&i| anomaly[i]).count() as u128;
        doubled_rank_sum += doubled * positives;
        start = end;
    }
    let doubled_u = doubled_rank_sum - pos * (pos + 1);
    Ok(doubled_u as f64 / (2 * pos * neg) as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded_rng;
    use rand::Rng;

    /// `(2·#{a > n} + #{a = n}) / (2·P·N)` over every pair.
    fn brute_force(scores: &[f64], anomaly: &[bool]) -> f64 {
        let mut num: u128 = 0;
        let (mut p, mut n) = (0u128, 0u128);
        for (i, &fi) in anomaly.iter().enumerate() {
            if fi {
                p += 1;
            } else {
                n += 1;
            }
            if !fi {
                continue;
            }
            for (j, &fj) in anomaly.iter().enumerate() {
                if fj {
                    continue;
                }
                if scores[i] > scores[j] {
                    num += 2;
                } else if scores[i] == scores[j] {
                    num += 1;
                }
            }
        }
        num as f64 / (2 * p * n) as f64
    }

    #[test]
    fn examples() {
        assert_eq!(compute_auc(&[0.9, 0.8, 0.2], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(compute_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert_eq!(compute_auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(compute_auc(&[0.1, 0.2], &[false, false]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(compute_auc(&[0.1], &[true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn matches_pairwise_oracle_with_ties() {
        let mut rng = seeded_rng(99);
        for _ in 0..200 {
            let m = rng.random_range(2..=50);
            let mut flags: Vec<bool> = (0..m).map(|_| rng.random_bool(0.4)).collect();
            flags[0] = true;
            flags[1] = false;
            // Coarse grid so ties are frequent.
            let scores: Vec<f64> = (0..m).map(|_| rng.random_range(0..8) as f64 / 7.0).collect();
            assert_eq!(compute_auc(&scores, &flags).unwrap(), brute_force(&scores, &flags));
        }
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
