//! Classification metrics and the learning-rate schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine decay from `lr_max` at `t = 0` to `lr_min` at `t = total`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::Argument(format!(
            "schedule step {t} outside [0, {total}]"
        )));
    }
    let phase = PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

/// Counts indexed `[true class][predicted class]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub n_classes: usize,
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_pairs(n_classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::Argument(format!(
                "{} labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut c = Self::new(n_classes);
        for (&t, &p) in truth.iter().zip(pred) {
            c.add(t, p)?;
        }
        Ok(c)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        let n = self.n_classes;
        if truth >= n || pred >= n {
            return Err(Error::Index {
                what: "class",
                index: truth.max(pred),
                len: n,
            });
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> usize {
        self.counts[class].iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let hit: usize = (0..self.n_classes).map(|i| self.counts[i][i]).sum();
        hit as f64 / self.total().max(1) as f64
    }

    /// Per-class `2·TP / (2·TP + FP + FN)`; `None` for a class that never
    /// occurs and is never predicted.
    pub fn f1_per_class(&self) -> Vec<Option<f64>> {
        (0..self.n_classes)
            .map(|c| {
                let tp = self.counts[c][c];
                let fn_ = self.support(c) - tp;
                let fp = (0..self.n_classes).map(|r| self.counts[r][c]).sum::<usize>() - tp;
                let den = 2 * tp + fp + fn_;
                (den > 0).then(|| 2.0 * tp as f64 / den as f64)
            })
            .collect()
    }

    /// Unweighted mean of the per-class F1 over classes that occur in the
    /// labels or the predictions.
    pub fn macro_f1(&self) -> f64 {
        let f: Vec<f64> = self.f1_per_class().into_iter().flatten().collect();
        if f.is_empty() {
            0.0
        } else {
            f.iter().sum::<f64>() / f.len() as f64
        }
    }
}

/// Index of the largest entry per row (first on ties).
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5).unwrap(), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5).unwrap() - 1e-5).abs() < 1e-12);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5).unwrap() - (1e-3 + 1e-5) / 2.0).abs() < 1e-12);
        assert!(cosine_lr(101, 100, 1e-3, 1e-5).is_err());
        assert!(cosine_lr(0, 0, 1e-3, 1e-5).is_err());
    }

    proptest! {
        #[test]
        fn schedule_never_increases(total in 1usize..400, lo in 0.0f64..1e-3, span in 0.0f64..1e-2) {
            let hi = lo + span;
            let mut prev = f64::INFINITY;
            for t in 0..=total {
                let lr = cosine_lr(t, total, hi, lo).unwrap();
                prop_assert!(lr <= prev);
                prop_assert!(lr >= lo - 1e-18 && lr <= hi + 1e-18);
                prev = lr;
            }
        }
    }

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 3, 0, 1, 2, 3];
        let c = Confusion::from_pairs(4, &y, &y).unwrap();
        assert_eq!(c.accuracy(), 1.0);
        assert_eq!(c.macro_f1(), 1.0);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(c.counts[i][j], if i == j { 2 } else { 0 });
            }
        }
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let y: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let c = Confusion::from_pairs(4, &y, &[2; 40]).unwrap();
        assert_eq!(c.accuracy(), 0.25);
        for k in 0..4 {
            assert_eq!(c.support(k), 10);
        }
    }

    #[test]
    fn macro_f1_matches_precision_recall_oracle() {
        let c = Confusion {
            n_classes: 3,
            counts: vec![vec![5, 2, 1], vec![0, 7, 3], vec![2, 1, 9]],
        };
        let mut f1 = 0.0;
        for k in 0..3 {
            let tp = c.counts[k][k] as f64;
            let precision = tp / (0..3).map(|r| c.counts[r][k]).sum::<usize>() as f64;
            let recall = tp / c.counts[k].iter().sum::<usize>() as f64;
            f1 += 2.0 * precision * recall / (precision + recall) / 3.0;
        }
        assert!((c.macro_f1() - f1).abs() < 1e-12);
        assert!((c.accuracy() - 21.0 / 30.0).abs() < 1e-15);
    }

    #[test]
    fn bad_class_index() {
        assert!(Confusion::from_pairs(2, &[0, 2], &[0, 1]).is_err());
        assert!(Confusion::from_pairs(2, &[0], &[0, 1]).is_err());
    }

    #[test]
    fn argmax_ties_go_to_first() {
        assert_eq!(argmax_rows(&[1.0, 3.0, 3.0, 0.0, 0.0, 0.0], 3), [1, 0]);
    }
}
