//! Ranking metrics: ROC AUC and cumulative accuracy profiles.

use serde::{Deserialize, Serialize};

use super::EvalError;

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(EvalError::NonBinaryLabel(bad));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::NanScore);
    }
    Ok(())
}

/// Mann-Whitney AUC: the probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleLabel);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are 1-based; a tie block [i, j) shares the rank (i + 1 + j) / 2.
    // Doubled ranks stay integral, so the sum is exact.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let positives = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        doubled_rank_sum += positives * (i as u128 + 1 + j as u128);
        i = j;
    }
    let (p, n) = (pos as u128, neg as u128);
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2 * p * n) as f64)
}

/// ROC points (false positive rate, true positive rate) from the strictest
/// threshold to the loosest; tied scores move together.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>, EvalError> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleLabel);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        i = j;
    }
    Ok(points)
}

/// Positives captured by every prefix of the descending score ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapCurve {
    pub n: usize,
    pub positives: usize,
    /// `captured[k]` = positives among the top `k` rows, `k = 0..=n`.
    pub captured: Vec<usize>,
}

impl CapCurve {
    /// (population fraction, captured-positive fraction) for every prefix.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.captured.iter().enumerate().map(|(k, &c)| (k as f64 / self.n as f64, c as f64 / self.positives as f64)).collect()
    }
}

/// Ranks by score descending; equal scores keep their input order.
pub fn cap_curve(scores: &[f64], labels: &[u8]) -> Result<CapCurve, EvalError> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut captured = Vec::with_capacity(scores.len() + 1);
    captured.push(0);
    let mut c = 0;
    for &i in &order {
        c += usize::from(labels[i]);
        captured.push(c);
    }
    Ok(CapCurve { n: scores.len(), positives, captured })
}

/// Share of all positives found in the top `ceil(q * n)` rows. `q` is
/// clamped to [0, 1]; products within 1e-9 of an integer count as that
/// integer so that e.g. 0.2 * 5 selects exactly one row.
pub fn cap_at(curve: &CapCurve, q: f64) -> f64 {
    let q = q.clamp(0.0, 1.0);
    let raw = q * curve.n as f64;
    let k = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() } as usize;
    curve.captured[k.min(curve.n)] as f64 / curve.positives as f64
}

/// At most `max_points` points spread evenly along `points`, always keeping
/// both ends.
pub fn thin(points: &[(f64, f64)], max_points: usize) -> Vec<(f64, f64)> {
    if points.len() <= max_points || max_points < 2 {
        return points.to_vec();
    }
    let last = points.len() - 1;
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(max_points);
    let mut previous = usize::MAX;
    for i in 0..max_points {
        let k = ((i * last) as f64 / (max_points - 1) as f64).round() as usize;
        if k != previous {
            out.push(points[k]);
            previous = k;
        }
    }
    out
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(s: &[f64], y: &[u8]) -> f64 {
        let (mut hits, mut pairs) = (0.0, 0.0);
        for i in 0..y.len() {
            for j in 0..y.len() {
                if y[i] == 1 && y[j] == 0 {
                    pairs += 1.0;
                    hits += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        hits / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.8, 0.6, 0.4, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.3; 6], &[1, 0, 1, 0, 0, 0]).unwrap(), 0.5);
    }

    #[test]
    fn auc_rejects_single_label() {
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(EvalError::SingleLabel)));
        assert!(matches!(roc_auc(&[0.1, 0.2], &[0, 0]), Err(EvalError::SingleLabel)));
        assert!(matches!(roc_auc(&[0.1], &[0, 1]), Err(EvalError::LengthMismatch { .. })));
    }

    #[test]
    fn cap_examples() {
        let perfect = cap_curve(&[0.9, 0.8, 0.3, 0.2, 0.1], &[1, 1, 0, 0, 0]).unwrap();
        assert_eq!(cap_at(&perfect, 0.4), 1.0);
        let c = cap_curve(&[0.9, 0.8, 0.7, 0.6, 0.5], &[1, 1, 0, 1, 0]).unwrap();
        assert!((cap_at(&c, 0.4) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(cap_at(&c, 0.0), 0.0);
        assert_eq!(cap_at(&c, 1.0), 1.0);
        // 0.2 * 5 selects one row, 0.21 * 5 rounds up to two
        assert!((cap_at(&c, 0.2) - 1.0 / 3.0).abs() < 1e-15);
        assert!((cap_at(&c, 0.21) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cap_ties_keep_input_order() {
        let c = cap_curve(&[0.5, 0.5, 0.5], &[0, 1, 0]).unwrap();
        assert_eq!(c.captured, vec![0, 0, 1, 1]);
    }

    #[test]
    fn cap_rejects_no_positives() {
        assert!(matches!(cap_curve(&[0.1, 0.2], &[0, 0]), Err(EvalError::NoPositives)));
    }

    #[test]
    fn roc_curve_endpoints() {
        let pts = roc_curve(&[0.9, 0.5, 0.5, 0.1], &[1, 0, 1, 0]).unwrap();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)]);
    }

    #[test]
    fn thinning_keeps_ends() {
        let pts: Vec<(f64, f64)> = (0..=100).map(|i| (i as f64, i as f64)).collect();
        let t = thin(&pts, 11);
        assert_eq!(t.len(), 11);
        assert_eq!(t[0], (0.0, 0.0));
        assert_eq!(t[10], (100.0, 100.0));
        assert_eq!(thin(&pts[..3], 11).len(), 3);
    }

    #[test]
    fn sample_std() {
        assert_eq!(std_dev(&[1.0]), 0.0);
        assert!((std_dev(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-15);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..200).prop_flat_map(|n| {
            // coarse scores produce plenty of ties
            (prop::collection::vec(0u8..12, n), prop::collection::vec(0u8..2, n))
                .prop_map(|(s, y)| (s.into_iter().map(|v| f64::from(v) / 11.0).collect(), y))
        })
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting((s, y) in instance()) {
            prop_assume!(y.contains(&0) && y.contains(&1));
            let fast = roc_auc(&s, &y).unwrap();
            prop_assert!((fast - brute_auc(&s, &y)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&fast));
        }

        #[test]
        fn cap_is_monotone_with_fixed_ends((s, y) in instance(), qs in prop::collection::vec(0.0f64..=1.0, 1..20)) {
            prop_assume!(y.contains(&1));
            let c = cap_curve(&s, &y).unwrap();
            prop_assert_eq!(cap_at(&c, 0.0), 0.0);
            prop_assert_eq!(cap_at(&c, 1.0), 1.0);
            let mut qs = qs;
            qs.sort_by(f64::total_cmp);
            for w in qs.windows(2) {
                prop_assert!(cap_at(&c, w[0]) <= cap_at(&c, w[1]));
            }
            let pts = c.points();
            prop_assert_eq!(pts[0], (0.0, 0.0));
            prop_assert_eq!(*pts.last().unwrap(), (1.0, 1.0));
        }

        #[test]
        fn roc_curve_is_monotone((s, y) in instance()) {
            prop_assume!(y.contains(&0) && y.contains(&1));
            let pts = roc_curve(&s, &y).unwrap();
            prop_assert_eq!(*pts.last().unwrap(), (1.0, 1.0));
            for w in pts.windows(2) {
                prop_assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
            }
        }
    }
}
