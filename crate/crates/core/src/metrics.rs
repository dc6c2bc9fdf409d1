//! Attack and target evaluation: accuracy, AUC, ROC points and TPR at a
//! fixed low FPR. Ties get half credit everywhere so AUC and the
//! trapezoid rule over the ROC agree.

use crate::scalar::Scalar;
use crate::{Error, Result};

/// ROC curve: (fpr, tpr) points with matching score thresholds.
/// Starts at (0,0) with threshold +inf, ends at (1,1) with -inf.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve<S: Scalar> {
    pub points: Vec<(S, S)>,
    pub thresholds: Vec<S>,
}

impl<S: Scalar> RocCurve<S> {
    /// Trapezoidal area under the curve.
    pub fn trapezoid_area(&self) -> S {
        let half = S::from_f64(0.5);
        let mut area = S::zero();
        for w in self.points.windows(2) {
            let (x0, y0) = w[0];
            let (x1, y1) = w[1];
            area = area + (x1 - x0) * (y0 + y1) * half;
        }
        area
    }

    /// CSV rows `threshold,fpr,tpr`, one per point, with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for (t, (f, p)) in self.thresholds.iter().zip(&self.points) {
            out.push_str(&format!("{},{},{}\n", t, f, p));
        }
        out
    }
}

fn check_lengths<S: Scalar>(scores: &[S], truth: &[u8]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Validation("empty input".into()));
    }
    if scores.len() != truth.len() {
        return Err(Error::Validation(format!(
            "scores length {} != truth length {}",
            scores.len(),
            truth.len()
        )));
    }
    if truth.iter().any(|&t| t > 1) {
        return Err(Error::Domain("truth must be 0 or 1".into()));
    }
    Ok(())
}

fn check_both_classes(truth: &[u8]) -> Result<(usize, usize)> {
    let pos = truth.iter().filter(|&&t| t == 1).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Validation(
            "both truth classes must be present".into(),
        ));
    }
    Ok((pos, neg))
}

/// Fraction of rows where (score >= threshold) equals the truth flag.
pub fn accuracy_at_threshold<S: Scalar>(scores: &[S], truth: &[u8], threshold: S) -> Result<f64> {
    check_lengths(scores, truth)?;
    let hits = scores
        .iter()
        .zip(truth)
        .filter(|(&s, &t)| u8::from(s >= threshold) == t)
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Mean of the per-class accuracies at the threshold; insensitive to
/// class imbalance in the truth.
pub fn balanced_accuracy_at_threshold<S: Scalar>(
    scores: &[S],
    truth: &[u8],
    threshold: S,
) -> Result<f64> {
    check_lengths(scores, truth)?;
    check_both_classes(truth)?;
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for (&s, &t) in scores.iter().zip(truth) {
        totals[t as usize] += 1;
        if u8::from(s >= threshold) == t {
            hits[t as usize] += 1;
        }
    }
    Ok(0.5 * (hits[0] as f64 / totals[0] as f64 + hits[1] as f64 / totals[1] as f64))
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half (Mann-Whitney), computed via one sort.
pub fn auc<S: Scalar>(scores: &[S], truth: &[u8]) -> Result<f64> {
    check_lengths(scores, truth)?;
    let (pos, neg) = check_both_classes(truth)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average ranks over tie groups.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if truth[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// One ROC point per distinct score threshold, by a single descending
/// sort; (0,0) prepended and (1,1) appended.
pub fn roc_points<S: Scalar>(scores: &[S], truth: &[u8]) -> Result<RocCurve<S>> {
    check_lengths(scores, truth)?;
    let (pos, neg) = check_both_classes(truth)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut points = vec![(S::zero(), S::zero())];
    let mut thresholds = vec![S::infinity()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if truth[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let fpr = S::from_f64(fp as f64 / neg as f64);
        let tpr = S::from_f64(tp as f64 / pos as f64);
        if points.last() != Some(&(fpr, tpr)) {
            points.push((fpr, tpr));
            thresholds.push(threshold);
        }
    }
    if *points.last().unwrap() != (S::one(), S::one()) {
        points.push((S::one(), S::one()));
        thresholds.push(S::neg_infinity());
    } else {
        *thresholds.last_mut().unwrap() = S::neg_infinity();
    }
    Ok(RocCurve { points, thresholds })
}

/// TPR at the largest threshold whose empirical FPR <= target_fpr
/// (step interpolation; conservative in the low-FPR regime).
pub fn tpr_at_fpr<S: Scalar>(scores: &[S], truth: &[u8], target_fpr: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&target_fpr) || target_fpr == 0.0 {
        return Err(Error::Validation("target_fpr must lie in (0, 1)".into()));
    }
    check_lengths(scores, truth)?;
    let (_, neg) = check_both_classes(truth)?;
    let needed = (1.0 / target_fpr).ceil() as usize;
    if neg < needed {
        return Err(Error::Resolution(format!(
            "target FPR {target_fpr} needs at least {needed} negatives, got {neg}"
        )));
    }
    let curve = roc_points(scores, truth)?;
    let target = S::from_f64(target_fpr);
    let mut best = 0.0f64;
    for &(fpr, tpr) in &curve.points {
        if fpr <= target {
            best = best.max(tpr.as_f64());
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(
            accuracy_at_threshold(&[1.0, 0.0, 1.0], &[1, 0, 1], 0.5).unwrap(),
            1.0
        );
        // all scores 0.5 with >= convention: everything predicted 1
        let acc = accuracy_at_threshold(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 0, 1], 0.5).unwrap();
        assert_eq!(acc, 0.5);
        let acc = accuracy_at_threshold(&[0.9, 0.4, 0.6], &[1, 0, 0], 0.5).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            accuracy_at_threshold::<f64>(&[], &[], 0.5),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn balanced_accuracy_examples() {
        // 3 of 4 negatives right, 1 of 1 positive right: (0.75 + 1) / 2
        let scores = [0.1, 0.2, 0.3, 0.9, 0.8];
        let truth = [0, 0, 0, 0, 1];
        let ba = balanced_accuracy_at_threshold(&scores, &truth, 0.5).unwrap();
        assert!((ba - 0.875).abs() <= 1e-12);
        // constant scores on skewed truth sit at exactly one half
        let ba = balanced_accuracy_at_threshold(&[0.4; 10], &[0, 0, 0, 0, 0, 0, 0, 0, 0, 1], 0.5)
            .unwrap();
        assert_eq!(ba, 0.5);
        assert!(matches!(
            balanced_accuracy_at_threshold(&[0.1, 0.2], &[0, 0], 0.5),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[1, 1, 0, 0]).unwrap(), 0.5);
        assert!(matches!(
            auc(&[0.5, 0.6], &[1, 1]),
            Err(Error::Validation(_))
        ));
    }

    /// O(n^2) pairwise oracle with half credit for ties.
    pub(crate) fn auc_bruteforce(scores: &[f64], truth: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if truth[i] == 1 && truth[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_matches_bruteforce_with_ties() {
        let mut rng = crate::rng::rng_from_seed(17);
        use rand::Rng;
        for _ in 0..20 {
            let n = rng.gen_range(5..200);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0..20) as f64) / 20.0)
                .collect();
            let mut truth: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            truth[0] = 1;
            truth[1] = 0;
            let fast = auc(&scores, &truth).unwrap();
            let slow = auc_bruteforce(&scores, &truth);
            assert!((fast - slow).abs() <= 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn roc_shape_and_consistency() {
        let scores = [0.9, 0.8, 0.8, 0.4, 0.3, 0.2];
        let truth = [1, 1, 0, 1, 0, 0];
        let curve = roc_points(&scores, &truth).unwrap();
        assert_eq!(curve.points.first().unwrap(), &(0.0, 0.0));
        assert_eq!(curve.points.last().unwrap(), &(1.0, 1.0));
        for w in curve.points.windows(2) {
            assert!(w[1].0 >= w[0].0);
            assert!(w[1].1 >= w[0].1);
        }
        let area = curve.trapezoid_area();
        let direct = auc(&scores, &truth).unwrap();
        assert!((area - direct).abs() <= 1e-12);
    }

    #[test]
    fn roc_perfect_and_degenerate() {
        let curve = roc_points(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert!(curve.points.contains(&(0.0, 1.0)));
        let flat = roc_points(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]).unwrap();
        assert_eq!(flat.points, vec![(0.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn tpr_at_fpr_behaviour() {
        // perfect separation: tpr 1.0 at any resolvable target
        let scores: Vec<f64> = (0..40).map(|i| if i < 20 { 0.9 } else { 0.1 }).collect();
        let truth: Vec<u8> = (0..40).map(|i| u8::from(i < 20)).collect();
        assert_eq!(tpr_at_fpr(&scores, &truth, 0.1).unwrap(), 1.0);

        // resolution guard: 500 negatives cannot resolve 0.1%
        let scores: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let truth: Vec<u8> = (0..1000).map(|i| u8::from(i >= 500)).collect();
        match tpr_at_fpr(&scores, &truth, 0.001).unwrap_err() {
            Error::Resolution(msg) => assert!(msg.contains("1000"), "{msg}"),
            other => panic!("expected resolution error, got {other}"),
        }
    }

    #[test]
    fn tpr_null_distribution_stays_low() {
        // scores independent of truth, n = 10000 per class, target 1%:
        // TPR should stay within [0, 0.03] for every seed.
        for seed in 0..5u64 {
            let mut rng = crate::rng::rng_from_seed(seed);
            use rand::Rng;
            let n = 10000;
            let mut scores = Vec::with_capacity(2 * n);
            let mut truth = Vec::with_capacity(2 * n);
            for i in 0..2 * n {
                scores.push(rng.gen::<f64>());
                truth.push(u8::from(i % 2 == 0));
            }
            let tpr = tpr_at_fpr(&scores, &truth, 0.01).unwrap();
            assert!((0.0..=0.03).contains(&tpr), "seed {seed}: tpr {tpr}");
        }
    }

    #[test]
    fn label_flip_antisymmetry() {
        let scores = [0.9, 0.1, 0.6, 0.6, 0.3];
        let truth = [1, 0, 1, 0, 1];
        let flipped: Vec<u8> = truth.iter().map(|&t| 1 - t).collect();
        let a = auc(&scores, &truth).unwrap();
        let b = auc(&scores, &flipped).unwrap();
        assert_eq!(a + b, 1.0);
    }

    #[test]
    fn monotone_transform_invariance() {
        let scores = [0.9, 0.1, 0.6, 0.55, 0.3, 0.2, 0.8];
        let truth = [1, 0, 1, 0, 1, 0, 1];
        let mapped: Vec<f64> = scores.iter().map(|&s: &f64| (3.0 * s).exp()).collect();
        assert_eq!(
            auc(&scores, &truth).unwrap(),
            auc(&mapped, &truth).unwrap()
        );
        let p1: Vec<(f64, f64)> = roc_points(&scores, &truth).unwrap().points;
        let p2: Vec<(f64, f64)> = roc_points(&mapped, &truth).unwrap().points;
        assert_eq!(p1, p2);
    }
}
