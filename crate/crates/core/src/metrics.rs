//! Calibration and uncertainty-quality metrics.
//!
//! Confidence is the top-class probability; it can never fall below 1/C, so
//! both binned errors partition the interval [1/C, 1] rather than [0, 1].

use crate::error::{Error, Result};
use crate::uq::ProbVector;

/// Metrics bundle produced by the experiment harness for one model state.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Report {
    pub ece: f64,
    pub ace: f64,
    pub brier: f64,
    pub accuracy: f64,
    pub coverage: f64,
    pub avg_set_size: f64,
    pub label_preservation: f64,
}

fn check_inputs(probs: &[ProbVector], labels: &[usize]) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::Empty("no predictions to score".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::Shape("probs/labels length mismatch".into()));
    }
    let c = probs[0].class_count();
    if probs.iter().any(|p| p.class_count() != c) {
        return Err(Error::Shape("ragged probability vectors".into()));
    }
    if labels.iter().any(|&y| y >= c) {
        return Err(Error::Index("label out of range".into()));
    }
    Ok(c)
}

/// Expected calibration error over equal-width confidence bins on [1/C, 1].
/// Empty bins contribute zero.
pub fn ece(probs: &[ProbVector], labels: &[usize], bins: usize) -> Result<f64> {
    let c = check_inputs(probs, labels)?;
    if bins < 1 {
        return Err(Error::Config("bins must be at least 1".into()));
    }
    let lo = 1.0 / c as f64;
    let width = (1.0 - lo) / bins as f64;
    let mut conf_sum = vec![0.0; bins];
    let mut acc_sum = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (p, &y) in probs.iter().zip(labels) {
        let conf = p.confidence();
        let mut b = if width > 0.0 {
            ((conf - lo) / width).floor() as isize
        } else {
            0
        };
        b = b.clamp(0, bins as isize - 1);
        let b = b as usize;
        conf_sum[b] += conf;
        acc_sum[b] += (p.predicted() == y) as usize as f64;
        count[b] += 1;
    }
    let n = probs.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let m = count[b] as f64;
        total += (m / n) * ((acc_sum[b] / m) - (conf_sum[b] / m)).abs();
    }
    Ok(total)
}

/// Adaptive calibration error over equal-mass bins of the confidence ranking.
/// Samples are ordered by (confidence, original index); a bin closes once it
/// holds at least n/bins samples and the next confidence differs, so ties
/// never straddle a boundary and identical confidences collapse to one bin.
pub fn ace(probs: &[ProbVector], labels: &[usize], bins: usize) -> Result<f64> {
    check_inputs(probs, labels)?;
    if bins < 1 {
        return Err(Error::Config("bins must be at least 1".into()));
    }
    if probs.len() < bins {
        return Err(Error::Config(format!(
            "need at least {bins} samples for {bins} equal-mass bins, got {}",
            probs.len()
        )));
    }
    let n = probs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        probs[a]
            .confidence()
            .partial_cmp(&probs[b].confidence())
            .unwrap()
            .then(a.cmp(&b))
    });
    let target = n as f64 / bins as f64;
    let mut total = 0.0;
    let mut start = 0;
    let mut filled = 0usize; // bins closed so far
    while start < n {
        // Close the bin at the cumulative quota, then extend through ties.
        let mut end = (((filled + 1) as f64 * target).round() as usize).clamp(start + 1, n);
        while end < n
            && probs[order[end]].confidence() == probs[order[end - 1]].confidence()
        {
            end += 1;
        }
        let mut conf_sum = 0.0;
        let mut acc_sum = 0.0;
        for &i in &order[start..end] {
            conf_sum += probs[i].confidence();
            acc_sum += (probs[i].predicted() == labels[i]) as usize as f64;
        }
        let m = (end - start) as f64;
        total += (m / n as f64) * ((acc_sum / m) - (conf_sum / m)).abs();
        start = end;
        filled += 1;
    }
    Ok(total)
}

/// Multiclass Brier score: mean squared distance to the one-hot label.
pub fn brier(probs: &[ProbVector], labels: &[usize]) -> Result<f64> {
    check_inputs(probs, labels)?;
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        for (c, &pc) in p.probs().iter().enumerate() {
            let t = (c == y) as usize as f64;
            total += (pc - t) * (pc - t);
        }
    }
    Ok(total / probs.len() as f64)
}

/// Fraction of positions whose predicted label is unchanged.
pub fn label_preservation(before: &[usize], after: &[usize]) -> Result<f64> {
    if before.len() != after.len() {
        return Err(Error::Shape("label vectors differ in length".into()));
    }
    if before.is_empty() {
        return Err(Error::Empty("no labels to compare".into()));
    }
    let same = before.iter().zip(after).filter(|(a, b)| a == b).count();
    Ok(same as f64 / before.len() as f64)
}

/// Fraction of rows classified correctly (argmax of the probability vector).
pub fn accuracy_of(probs: &[ProbVector], labels: &[usize]) -> Result<f64> {
    check_inputs(probs, labels)?;
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, &y)| p.predicted() == y)
        .count();
    Ok(hits as f64 / probs.len() as f64)
}

/// (mean confidence, mean accuracy, count) per ECE bin; the harness dumps
/// these as reliability-diagram CSV rows.
pub fn reliability_bins(
    probs: &[ProbVector],
    labels: &[usize],
    bins: usize,
) -> Result<Vec<(f64, f64, usize)>> {
    let c = check_inputs(probs, labels)?;
    let lo = 1.0 / c as f64;
    let width = (1.0 - lo) / bins as f64;
    let mut conf_sum = vec![0.0; bins];
    let mut acc_sum = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (p, &y) in probs.iter().zip(labels) {
        let conf = p.confidence();
        let b = (((conf - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
        conf_sum[b] += conf;
        acc_sum[b] += (p.predicted() == y) as usize as f64;
        count[b] += 1;
    }
    Ok((0..bins)
        .map(|b| {
            if count[b] == 0 {
                (0.0, 0.0, 0)
            } else {
                let m = count[b] as f64;
                (conf_sum[b] / m, acc_sum[b] / m, count[b])
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    /// Binary prob vector with the requested top-class confidence, correct or
    /// not against the returned label.
    fn sample(conf: f64, correct: bool) -> (ProbVector, usize) {
        let p = ProbVector::new(vec![conf, 1.0 - conf]).unwrap();
        let label = if correct { 0 } else { 1 };
        (p, label)
    }

    fn fixture_04() -> (Vec<ProbVector>, Vec<usize>) {
        let rows = [(0.9, true), (0.9, false), (0.6, true), (0.6, true)];
        let (probs, labels): (Vec<_>, Vec<_>) = rows.iter().map(|&(c, k)| sample(c, k)).unzip();
        (probs, labels)
    }

    #[test]
    fn hand_binned_ece_fixture_is_04() {
        // Two equal-width bins on [.5, 1]: {.6,.6} -> |1 - .6| = .4 and
        // {.9,.9} -> |.5 - .9| = .4, each with weight .5.
        let (probs, labels) = fixture_04();
        let e = ece(&probs, &labels, 2).unwrap();
        assert!((e - 0.4).abs() < 1e-12, "ece {e}");
    }

    #[test]
    fn equal_mass_bins_give_same_partition_on_fixture() {
        let (probs, labels) = fixture_04();
        let a = ace(&probs, &labels, 2).unwrap();
        assert!((a - 0.4).abs() < 1e-12, "ace {a}");
    }

    #[test]
    fn all_correct_at_full_confidence_scores_zero() {
        let probs = vec![ProbVector::new(vec![1.0, 0.0]).unwrap(); 5];
        let labels = vec![0usize; 5];
        assert_eq!(ece(&probs, &labels, 15).unwrap(), 0.0);
        assert_eq!(brier(&probs, &labels).unwrap(), 0.0);
    }

    #[test]
    fn identical_confidences_collapse_to_one_ace_bin() {
        let rows = [(0.7, true), (0.7, false), (0.7, true), (0.7, true)];
        let (probs, labels): (Vec<_>, Vec<_>) = rows.iter().map(|&(c, k)| sample(c, k)).unzip();
        let a = ace(&probs, &labels, 2).unwrap();
        assert!((a - (0.75f64 - 0.7).abs()).abs() < 1e-12, "ace {a}");
    }

    #[test]
    fn calibrated_generator_has_tiny_ece_and_ace() {
        // Confidence c drawn uniformly, correctness Bernoulli(c): calibrated.
        let mut r = rng::rng(17);
        let n = 100_000;
        let mut probs = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let c = 0.5 + 0.5 * r.gen::<f64>();
            let correct = r.gen::<f64>() < c;
            let (p, y) = sample(c, correct);
            probs.push(p);
            labels.push(y);
        }
        let e = ece(&probs, &labels, 15).unwrap();
        let a = ace(&probs, &labels, 15).unwrap();
        assert!(e <= 0.02, "ece {e}");
        assert!(a <= 0.02, "ace {a}");
    }

    #[test]
    fn brier_hand_values() {
        let p = ProbVector::new(vec![0.7, 0.3]).unwrap();
        assert!((brier(&[p], &[0]).unwrap() - 0.18).abs() < 1e-15);
        let u = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert!((brier(&[u.clone()], &[0]).unwrap() - 0.5).abs() < 1e-15);
        assert!((brier(&[u], &[1]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn label_preservation_counts_matches() {
        assert_eq!(label_preservation(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(label_preservation(&[1, 2, 3], &[4, 5, 6]).unwrap(), 0.0);
        let before: Vec<usize> = (0..10).collect();
        let mut after = before.clone();
        after[7] = 99;
        assert!((label_preservation(&before, &after).unwrap() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(ece(&[], &[], 10), Err(Error::Empty(_))));
        assert!(matches!(brier(&[], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn ece_equals_ace_for_single_bin_distinct_confidences() {
        let mut r = rng::rng(3);
        let rows: Vec<(ProbVector, usize)> = (0..50)
            .map(|_| sample(0.5 + 0.499 * r.gen::<f64>(), r.gen::<bool>()))
            .collect();
        let (probs, labels): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        let e = ece(&probs, &labels, 1).unwrap();
        let a = ace(&probs, &labels, 1).unwrap();
        assert!((e - a).abs() < 1e-12);
    }

    #[test]
    fn permuting_samples_leaves_metrics_unchanged() {
        let mut r = rng::rng(23);
        let rows: Vec<(ProbVector, usize)> = (0..64)
            .map(|_| sample(0.5 + 0.5 * r.gen::<f64>(), r.gen::<bool>()))
            .collect();
        let (probs, labels): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        let mut perm: Vec<usize> = (0..probs.len()).collect();
        for i in (1..perm.len()).rev() {
            let j = r.gen_range(0..=i);
            perm.swap(i, j);
        }
        let probs_p: Vec<ProbVector> = perm.iter().map(|&i| probs[i].clone()).collect();
        let labels_p: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        for bins in [1, 5, 15] {
            let e0 = ece(&probs, &labels, bins).unwrap();
            let e1 = ece(&probs_p, &labels_p, bins).unwrap();
            assert!((e0 - e1).abs() < 1e-12);
            let a0 = ace(&probs, &labels, bins).unwrap();
            let a1 = ace(&probs_p, &labels_p, bins).unwrap();
            assert!((a0 - a1).abs() < 1e-12);
        }
        let b0 = brier(&probs, &labels).unwrap();
        let b1 = brier(&probs_p, &labels_p).unwrap();
        assert!((b0 - b1).abs() < 1e-12);
    }
}
