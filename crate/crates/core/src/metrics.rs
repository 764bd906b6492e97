//! Frame-level detection metrics: confusion counts, precision/recall/F1,
//! accuracy, and rank-based AUC.
//!
//! AUC is the probability a random fake outranks a random real, with ties
//! counted half. It is computed from sorted average ranks in exact half-unit
//! integers, so the result is bitwise identical to the O(N^2) pairwise
//! enumeration: both form the same integer numerator and divide once.

use crate::error::{Error, Result};

/// Parallel scores and 0/1 labels (0 = real, 1 = fake).
#[derive(Clone, Debug)]
pub struct ScoreSet {
    scores: Vec<f32>,
    labels: Vec<u8>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f32>, labels: Vec<u8>) -> Result<ScoreSet> {
        if scores.is_empty() || scores.len() != labels.len() {
            return Err(Error::shape(format!(
                "want equal nonempty score/label lists, got {} and {}",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::domain(format!("non-finite score {bad}")));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::domain("labels must be 0 (real) or 1 (fake)".to_string()));
        }
        Ok(ScoreSet { scores, labels })
    }

    /// Parses `score,label` CSV: one header line, one sample per row.
    pub fn from_csv(text: &str) -> Result<ScoreSet> {
        let mut lines = text.lines().map(str::trim);
        match lines.next() {
            Some("score,label") => {}
            other => {
                return Err(Error::format(format!(
                    "want header \"score,label\", got {other:?}"
                )))
            }
        }
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (s, l) = line.split_once(',').ok_or_else(|| {
                Error::format(format!("row {}: want \"score,label\", got {line:?}", i + 2))
            })?;
            let score: f32 = s
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("row {}: bad score {s:?}", i + 2)))?;
            let label: u8 = l
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("row {}: bad label {l:?}", i + 2)))?;
            scores.push(score);
            labels.push(label);
        }
        ScoreSet::new(scores, labels).map_err(|e| Error::format(e.to_string()))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

/// Counts predictions at `threshold`; a score exactly at the threshold
/// predicts fake.
pub fn confusion(s: &ScoreSet, threshold: f32) -> ConfusionCounts {
    let mut c = ConfusionCounts { true_pos: 0, true_neg: 0, false_pos: 0, false_neg: 0 };
    for (&score, &label) in s.scores.iter().zip(&s.labels) {
        match (score >= threshold, label == 1) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    c
}

fn ratio(num: usize, den: usize) -> f64 {
    // Every 0/0 in these definitions is 0 by convention.
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// (precision, recall, F1, accuracy) from counts; 0/0 cases are 0.
pub fn prf_acc(c: &ConfusionCounts) -> (f64, f64, f64, f64) {
    let p = ratio(c.true_pos, c.true_pos + c.false_pos);
    let r = ratio(c.true_pos, c.true_pos + c.false_neg);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let acc = ratio(
        c.true_pos + c.true_neg,
        c.true_pos + c.true_neg + c.false_pos + c.false_neg,
    );
    (p, r, f1, acc)
}

/// Probability a random fake outranks a random real, ties counted half.
pub fn auc(s: &ScoreSet) -> Result<f64> {
    let n = s.len();
    let n_fake = s.labels.iter().filter(|&&l| l == 1).count();
    let n_real = n - n_fake;
    if n_fake == 0 || n_real == 0 {
        return Err(Error::domain(format!(
            "AUC needs both classes, got {n_fake} fake / {n_real} real"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| s.scores[a].partial_cmp(&s.scores[b]).expect("finite scores"));

    // Sum of fake ranks in half-units: a tie group spanning 1-based ranks
    // lo..=hi contributes (lo + hi) per member, twice the average rank.
    let mut fake_rank_halves: u64 = 0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && s.scores[idx[j + 1]] == s.scores[idx[i]] {
            j += 1;
        }
        let avg_half = (i + j + 2) as u64;
        for &k in &idx[i..=j] {
            if s.labels[k] == 1 {
                fake_rank_halves += avg_half;
            }
        }
        i = j + 1;
    }
    let wins_half = fake_rank_halves - (n_fake as u64) * (n_fake as u64 + 1);
    Ok(wins_half as f64 / (2.0 * n_fake as f64 * n_real as f64))
}

/// Everything the evaluation emits, in stable field order.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub threshold: f32,
}

pub fn report(s: &ScoreSet, threshold: f32) -> Result<MetricsReport> {
    let (precision, recall, f1, acc) = prf_acc(&confusion(s, threshold));
    Ok(MetricsReport { acc, precision, recall, f1, auc: auc(s)?, threshold })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(scores: &[f32], labels: &[u8]) -> ScoreSet {
        ScoreSet::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    /// O(N^2) enumeration in the same half-unit integers.
    fn pairwise_auc(s: &ScoreSet) -> f64 {
        let mut halves: u64 = 0;
        let mut n_fake = 0u64;
        for (i, &lf) in s.labels().iter().enumerate() {
            if lf != 1 {
                continue;
            }
            n_fake += 1;
            for (j, &lr) in s.labels().iter().enumerate() {
                if lr != 0 {
                    continue;
                }
                if s.scores()[i] > s.scores()[j] {
                    halves += 2;
                } else if s.scores()[i] == s.scores()[j] {
                    halves += 1;
                }
            }
        }
        let n_real = s.labels().iter().filter(|&&l| l == 0).count() as u64;
        halves as f64 / (2.0 * n_fake as f64 * n_real as f64)
    }

    #[test]
    fn perfect_split_confusion() {
        let c = confusion(&set(&[0.9, 0.1], &[1, 0]), 0.5);
        assert_eq!(
            c,
            ConfusionCounts { true_pos: 1, true_neg: 1, false_pos: 0, false_neg: 0 }
        );
    }

    #[test]
    fn score_at_threshold_predicts_fake() {
        let c = confusion(&set(&[0.5], &[0]), 0.5);
        assert_eq!(c.false_pos, 1);
        let c = confusion(&set(&[0.5], &[1]), 0.5);
        assert_eq!(c.true_pos, 1);
    }

    #[test]
    fn random_confusions_match_a_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.random_range(1..50);
            let scores: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            let t: f32 = rng.random_range(0.0..1.0);
            let s = set(&scores, &labels);
            let c = confusion(&s, t);
            let (mut tp, mut tn, mut fp, mut fne) = (0, 0, 0, 0);
            for i in 0..n {
                if scores[i] >= t {
                    if labels[i] == 1 {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                } else if labels[i] == 1 {
                    fne += 1;
                } else {
                    tn += 1;
                }
            }
            assert_eq!(
                c,
                ConfusionCounts { true_pos: tp, true_neg: tn, false_pos: fp, false_neg: fne }
            );
            assert_eq!(c.true_pos + c.true_neg + c.false_pos + c.false_neg, n);
        }
    }

    #[test]
    fn balanced_eighty_percent_counts() {
        let c = ConfusionCounts { true_pos: 8, false_pos: 2, false_neg: 2, true_neg: 8 };
        let (p, r, f1, acc) = prf_acc(&c);
        assert_eq!(p, 0.8);
        assert_eq!(r, 0.8);
        assert_eq!(acc, 0.8);
        assert!((f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_over_zero_is_zero() {
        let c = ConfusionCounts { true_pos: 0, false_pos: 0, false_neg: 5, true_neg: 5 };
        let (p, r, f1, acc) = prf_acc(&c);
        assert_eq!((p, r, f1), (0.0, 0.0, 0.0));
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn mixed_counts_match_hand_arithmetic() {
        let c = ConfusionCounts { true_pos: 3, false_pos: 1, false_neg: 2, true_neg: 4 };
        let (p, r, f1, acc) = prf_acc(&c);
        assert_eq!(p, 0.75);
        assert!((r - 0.6).abs() < 1e-12);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(acc, 0.7);
    }

    #[test]
    fn separated_scores_have_unit_auc() {
        let s = set(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]);
        assert_eq!(auc(&s).unwrap(), 1.0);
    }

    #[test]
    fn one_losing_pair_gives_three_quarters() {
        let s = set(&[0.9, 0.3, 0.4, 0.1], &[1, 1, 0, 0]);
        assert_eq!(auc(&s).unwrap(), 0.75);
    }

    #[test]
    fn all_ties_give_one_half() {
        let s = set(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]);
        assert_eq!(auc(&s).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_a_domain_error() {
        assert!(matches!(auc(&set(&[0.5, 0.2], &[1, 1])), Err(Error::Domain(_))));
        assert!(matches!(auc(&set(&[0.5, 0.2], &[0, 0])), Err(Error::Domain(_))));
    }

    #[test]
    fn auc_is_invariant_under_increasing_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let n = rng.random_range(4..60);
            // Coarse grid scores so ties occur and transforms cannot collide.
            let scores: Vec<f32> = (0..n).map(|_| rng.random_range(0..11) as f32 / 10.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let base = auc(&set(&scores, &labels)).unwrap();
            let affine: Vec<f32> = scores.iter().map(|&v| 2.0 * v + 3.0).collect();
            assert_eq!(auc(&set(&affine, &labels)).unwrap(), base);
            let expd: Vec<f32> = scores.iter().map(|&v| v.exp()).collect();
            assert_eq!(auc(&set(&expd, &labels)).unwrap(), base);
        }
    }

    #[test]
    fn label_swap_complements_auc() {
        // Power-of-two pair counts keep both rationals representable, so the
        // complement identity holds exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(n_fake, n_real) in &[(4usize, 4usize), (8, 16), (2, 32)] {
            let scores: Vec<f32> = (0..n_fake + n_real)
                .map(|_| rng.random_range(0..7) as f32 / 6.0)
                .collect();
            let labels: Vec<u8> =
                (0..n_fake + n_real).map(|i| u8::from(i < n_fake)).collect();
            let swapped: Vec<u8> = labels.iter().map(|&l| 1 - l).collect();
            let a = auc(&set(&scores, &labels)).unwrap();
            let b = auc(&set(&scores, &swapped)).unwrap();
            assert_eq!(a + b, 1.0);
        }
    }

    #[test]
    fn rank_auc_equals_pairwise_enumeration_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for round in 0..30 {
            let n = rng.random_range(2..200);
            // Quantized scores force plenty of ties.
            let scores: Vec<f32> = (0..n).map(|_| rng.random_range(0..20) as f32 / 19.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            labels[0] = 1;
            if n > 1 {
                labels[1] = 0;
            }
            let s = set(&scores, &labels);
            let fast = auc(&s).unwrap();
            let slow = pairwise_auc(&s);
            assert!(fast == slow, "round {round}: {fast} != {slow}");
        }
    }

    #[test]
    fn csv_round_trip_and_rejections() {
        let s = ScoreSet::from_csv("score,label\n0.9,1\n0.1,0\n\n0.5,1\n").unwrap();
        assert_eq!(s.scores(), &[0.9, 0.1, 0.5]);
        assert_eq!(s.labels(), &[1, 0, 1]);
        assert!(matches!(ScoreSet::from_csv("label,score\n1,0.9"), Err(Error::Format(_))));
        assert!(matches!(ScoreSet::from_csv("score,label\n0.9;1"), Err(Error::Format(_))));
        assert!(matches!(ScoreSet::from_csv("score,label\nfoo,1"), Err(Error::Format(_))));
        assert!(matches!(ScoreSet::from_csv("score,label\n0.9,2"), Err(Error::Format(_))));
        assert!(matches!(ScoreSet::from_csv("score,label\n"), Err(Error::Format(_))));
        assert!(matches!(ScoreSet::from_csv("score,label\nnan,1"), Err(Error::Format(_))));
    }

    #[test]
    fn report_composes_the_pieces() {
        let s = set(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]);
        let r = report(&s, 0.5).unwrap();
        assert_eq!(r.acc, 1.0);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.threshold, 0.5);
        for v in [r.acc, r.precision, r.recall, r.f1, r.auc] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
