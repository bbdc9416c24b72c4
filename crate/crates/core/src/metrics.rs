//! One-vs-rest confusion counts and the derived scores (accuracy,
//! precision, recall, F1, critical success index).

use crate::error::{Error, Result};
use crate::raster::LabelMask;

/// Per-class one-vs-rest counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub csi: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Derived scores with every 0/0 case defined as 0. The identity
/// csi = f1 / (2 − f1) holds by construction.
pub fn scores(counts: &ConfusionCounts) -> Scores {
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let csi = ratio(counts.tp, counts.tp + counts.fp + counts.fn_);
    Scores {
        accuracy: ratio(counts.tp + counts.tn, counts.total()),
        precision,
        recall,
        f1,
        csi,
    }
}

/// F1 from precision/recall percentages, used when checking published
/// tables.
pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// The F1 → CSI identity: csi = f1 / (2 − f1), on fractions.
pub fn csi_from_f1(f1: f64) -> f64 {
    f1 / (2.0 - f1)
}

/// One-vs-rest confusion counts for classes 1..=num_classes over the given
/// pixel indices (row-major); `None` evaluates every pixel.
pub fn confusion(
    pred: &LabelMask,
    truth: &LabelMask,
    eval_idx: Option<&[usize]>,
    num_classes: usize,
) -> Result<Vec<ConfusionCounts>> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(Error::invalid("mask size mismatch"));
    }
    if num_classes == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    let total = pred.width() * pred.height();
    let mut counts = vec![ConfusionCounts::default(); num_classes];
    let mut tally = |idx: usize| -> Result<()> {
        if idx >= total {
            return Err(Error::invalid(format!("pixel index {idx} out of range")));
        }
        let p = pred.labels()[idx];
        let t = truth.labels()[idx];
        for (ci, c) in counts.iter_mut().enumerate() {
            let class = ci as u8 + 1;
            match (p == class, t == class) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(())
    };
    match eval_idx {
        Some(indices) => {
            for &idx in indices {
                tally(idx)?;
            }
        }
        None => {
            for idx in 0..total {
                tally(idx)?;
            }
        }
    }
    Ok(counts)
}

/// Plain multiclass accuracy over the given indices.
pub fn multiclass_accuracy(
    pred: &LabelMask,
    truth: &LabelMask,
    eval_idx: &[usize],
) -> Result<f64> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(Error::invalid("mask size mismatch"));
    }
    if eval_idx.is_empty() {
        return Ok(0.0);
    }
    let mut hit = 0usize;
    for &idx in eval_idx {
        if idx >= pred.labels().len() {
            return Err(Error::invalid(format!("pixel index {idx} out of range")));
        }
        if pred.labels()[idx] == truth.labels()[idx] {
            hit += 1;
        }
    }
    Ok(hit as f64 / eval_idx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction_has_no_errors() {
        let truth = LabelMask::new(3, 2, vec![1, 2, 3, 1, 2, 3]).unwrap();
        let counts = confusion(&truth, &truth, None, 3).unwrap();
        for c in &counts {
            assert_eq!(c.fp, 0);
            assert_eq!(c.fn_, 0);
        }
        assert_eq!(counts[0].tp, 2);
        assert_eq!(counts[0].tn, 4);
    }

    #[test]
    fn counting_example() {
        // 10 pixels: 8 TP / 1 FP / 1 FN for class 1, no TN
        let truth = LabelMask::new(10, 1, vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 2]).unwrap();
        let pred = LabelMask::new(10, 1, vec![1, 1, 1, 1, 1, 1, 1, 1, 2, 1]).unwrap();
        let counts = confusion(&pred, &truth, None, 2).unwrap();
        assert_eq!(
            counts[0],
            ConfusionCounts {
                tp: 8,
                fp: 1,
                fn_: 1,
                tn: 0
            }
        );
        let s = scores(&counts[0]);
        assert_abs_diff_eq!(s.precision, 8.0 / 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.recall, 8.0 / 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.csi, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn confusion_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (w, h) = (rng.gen_range(2..10), rng.gen_range(2..10));
            let t: Vec<u8> = (0..w * h).map(|_| rng.gen_range(0..4)).collect();
            let p: Vec<u8> = (0..w * h).map(|_| rng.gen_range(0..4)).collect();
            let truth = LabelMask::new(w, h, t.clone()).unwrap();
            let pred = LabelMask::new(w, h, p.clone()).unwrap();
            let counts = confusion(&pred, &truth, None, 3).unwrap();
            for class in 1..=3u8 {
                let mut oracle = ConfusionCounts::default();
                for i in 0..w * h {
                    match (p[i] == class, t[i] == class) {
                        (true, true) => oracle.tp += 1,
                        (true, false) => oracle.fp += 1,
                        (false, true) => oracle.fn_ += 1,
                        (false, false) => oracle.tn += 1,
                    }
                }
                assert_eq!(counts[class as usize - 1], oracle);
                assert_eq!(oracle.total(), w * h);
            }
        }
    }

    #[test]
    fn published_row_identities() {
        // Pr 87.1, Rec 94.3 -> F1 90.6, CSI 82.7
        let f1 = f1_from_pr(87.1, 94.3);
        assert!((f1 - 90.6).abs() < 0.1, "{f1}");
        let csi = csi_from_f1(f1 / 100.0) * 100.0;
        assert!((csi - 82.7).abs() < 0.15, "{csi}");
    }

    #[test]
    fn zero_cases_define_zero_scores() {
        let s = scores(&ConfusionCounts::default());
        assert_eq!(s.precision, 0.0);
        assert_eq!(s.recall, 0.0);
        assert_eq!(s.f1, 0.0);
        assert_eq!(s.csi, 0.0);
    }

    #[test]
    fn csi_identity_holds_for_computed_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let c = ConfusionCounts {
                tp: rng.gen_range(0..50),
                fp: rng.gen_range(0..50),
                fn_: rng.gen_range(0..50),
                tn: rng.gen_range(0..50),
            };
            let s = scores(&c);
            if s.f1 > 0.0 {
                assert_abs_diff_eq!(s.csi, csi_from_f1(s.f1), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn eval_subset_restricts_counting() {
        let truth = LabelMask::new(4, 1, vec![1, 1, 2, 2]).unwrap();
        let pred = LabelMask::new(4, 1, vec![1, 2, 2, 1]).unwrap();
        let counts = confusion(&pred, &truth, Some(&[0, 2]), 2).unwrap();
        assert_eq!(counts[0].tp, 1);
        assert_eq!(counts[0].fp + counts[0].fn_, 0);
        assert_eq!(multiclass_accuracy(&pred, &truth, &[0, 2]).unwrap(), 1.0);
        assert_eq!(multiclass_accuracy(&pred, &truth, &[1, 3]).unwrap(), 0.0);
    }
}
