use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Pixel confusion counts of a binary prediction against binary truth.
pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} pixels, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fn_ += 1,
            _ => {
                return Err(Error::InvalidInput(format!(
                    "non-binary value at pixel {i}: pred={p} truth={t}"
                )))
            }
        }
    }
    Ok(c)
}

/// Metrics with a zero denominator are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub iou: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn seg_metrics(c: &ConfusionCounts) -> SegMetrics {
    SegMetrics {
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_positive_match() {
        let c = confusion(&[1; 4], &[1; 4]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 4, fp: 0, tn: 0, fn_: 0 });
    }

    #[test]
    fn inverted_prediction() {
        let truth = [1, 0, 0, 1, 1, 0];
        let pred: Vec<u8> = truth.iter().map(|t| 1 - t).collect();
        let c = confusion(&pred, &truth).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!(c.fp + c.fn_, 6);
    }

    #[test]
    fn confusion_errors() {
        assert!(matches!(confusion(&[1, 0], &[1]), Err(Error::ShapeMismatch(_))));
        assert!(confusion(&[2], &[1]).is_err());
    }

    #[test]
    fn direct_substitution() {
        let m = seg_metrics(&ConfusionCounts { tp: 2, fp: 1, tn: 0, fn_: 1 });
        assert_eq!(m.iou, Some(0.5));
        assert!((m.f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.accuracy, Some(0.5));
    }

    #[test]
    fn no_positives_anywhere() {
        let m = seg_metrics(&ConfusionCounts { tp: 0, fp: 0, tn: 5, fn_: 0 });
        assert_eq!(m.iou, None);
        assert_eq!(m.f1, None);
        assert_eq!(m.precision, None);
        assert_eq!(m.accuracy, Some(1.0));
        let empty = seg_metrics(&ConfusionCounts::default());
        assert_eq!(empty.accuracy, None);
    }
}
