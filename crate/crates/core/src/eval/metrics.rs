//! Per-class F1 and its macro average, in percent.

use serde::{Deserialize, Serialize};

use crate::dataio::Intent;
use crate::error::{Error, Result};

/// Binary confusion counts with one class taken as positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(pred: &[Intent], gold: &[Intent], positive: Intent) -> Self {
        let mut c = ConfusionCounts::default();
        for (&p, &g) in pred.iter().zip(gold) {
            match (p == positive, g == positive) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2TP / (2TP + FP + FN)` in percent. A class absent from both the
    /// predictions and the gold labels scores 100.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            100.0
        } else {
            100.0 * (2 * self.tp) as f64 / denom as f64
        }
    }
}

/// `(f1_reading, f1_scanning)` in percent.
pub fn f1_per_class(pred: &[Intent], gold: &[Intent]) -> Result<(f64, f64)> {
    if pred.is_empty() {
        return Err(Error::Dataset("F1 of an empty prediction set".into()));
    }
    if pred.len() != gold.len() {
        return Err(Error::Dataset(format!(
            "{} predictions for {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    Ok((
        ConfusionCounts::from_predictions(pred, gold, Intent::Reading).f1(),
        ConfusionCounts::from_predictions(pred, gold, Intent::Scanning).f1(),
    ))
}

pub fn macro_f1(f1_reading: f64, f1_scanning: f64) -> f64 {
    (f1_reading + f1_scanning) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use Intent::{Reading as R, Scanning as S};

    #[test]
    fn perfect_predictions() {
        let gold = [R, S, S, R, R];
        assert_eq!(f1_per_class(&gold, &gold).unwrap(), (100.0, 100.0));
    }

    #[test]
    fn two_thirds_example() {
        // reading: TP=2, FP=1, FN=1
        let pred = [R, R, R, S, S];
        let gold = [R, R, S, R, S];
        let (fr, _) = f1_per_class(&pred, &gold).unwrap();
        assert!((fr - 66.67).abs() < 0.005, "{fr}");
    }

    #[test]
    fn degenerate_classes() {
        // scanning absent everywhere
        assert_eq!(f1_per_class(&[R, R], &[R, R]).unwrap(), (100.0, 100.0));
        // scanning predicted but absent from gold
        assert_eq!(f1_per_class(&[S, R], &[R, R]).unwrap().1, 0.0);
    }

    #[test]
    fn errors() {
        assert!(f1_per_class(&[], &[]).is_err());
        assert!(f1_per_class(&[R], &[R, S]).is_err());
    }

    #[test]
    fn macro_idempotent() {
        for x in [0.0, 12.5, 73.1, 100.0] {
            assert_eq!(macro_f1(x, x), x);
        }
    }
}
