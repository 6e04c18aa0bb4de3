use crate::error::{Error, Result};

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs where the positive scores higher, ties counting
/// one half. Runs in O(n log n) by ranking with average ranks over ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auc scores".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, kept integral so the result is exact.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the average (i + j + 2) / 2
        let positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += positives * (i + j + 2) as u128;
        i = j + 1;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    // U = rank_sum - p(p+1)/2, so 2U = twice_rank_sum - p(p+1)
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * q) as f64)
}

/// O(n²) pair-counting AUC, kept as a reference for the sorting version.
pub fn auc_pairwise(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let pos: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] == 1).map(|i| scores[i]).collect();
    let neg: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] != 1).map(|i| scores[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedMetric("AUC needs both classes present".into()));
    }
    let mut twice_wins: u128 = 0;
    for &a in &pos {
        for &b in &neg {
            twice_wins += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    Ok(twice_wins as f64 / (2 * pos.len() * neg.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_cases() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        // pairs: 0.3 vs {0.7, 0.2} -> 0 + 1; 0.7 vs {0.7, 0.2} -> 0.5 + 1
        assert_eq!(auc(&[0.3, 0.7, 0.7, 0.2], &[1, 0, 1, 0]).unwrap(), 0.625);
        assert_eq!(auc_pairwise(&[0.3, 0.7, 0.7, 0.2], &[1, 0, 1, 0]).unwrap(), 0.625);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auc(&[0.1, 0.2], &[0, 0]), Err(Error::UndefinedMetric(_))));
    }

    fn case() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..200).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..12).prop_map(|v| f64::from(v) / 4.0), n),
                prop::collection::vec(0u8..2, n),
            )
        })
    }

    proptest! {
        #[test]
        fn sorting_matches_pair_counting((scores, labels) in case()) {
            let fast = auc(&scores, &labels);
            let slow = auc_pairwise(&scores, &labels);
            match (fast, slow) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "disagreement on definedness"),
            }
        }

        #[test]
        fn flipped_labels_complement((scores, labels) in case()) {
            let flipped: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
            if let (Ok(a), Ok(b)) = (auc(&scores, &labels), auc(&scores, &flipped)) {
                prop_assert_eq!(a + b, 1.0);
            }
        }

        #[test]
        fn monotone_transform_invariance((scores, labels) in case()) {
            let moved: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            if let Ok(a) = auc(&scores, &labels) {
                prop_assert_eq!(a, auc(&moved, &labels).unwrap());
            }
        }
    }
}
