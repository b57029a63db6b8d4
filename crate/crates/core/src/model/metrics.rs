//! Classification metrics: accuracy, per-class precision/recall/F1 and the
//! confusion matrix (rows = true class, columns = predicted class).

use serde::{Deserialize, Serialize};

use super::network::{LinearOp, Network};
use super::{ModelError, SequenceSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// `None` when the class was never predicted.
    pub precision: Option<f64>,
    /// `None` when the class never occurs in the labels.
    pub recall: Option<f64>,
    /// `2tp / (2tp + fp + fn)`; `None` when the class is absent from both.
    pub f1: Option<f64>,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<usize>>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let m = confusion.len();
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..m).map(|c| confusion[c][c]).sum();
        let per_class: Vec<ClassMetrics> = (0..m)
            .map(|c| {
                let tp = confusion[c][c];
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = confusion.iter().map(|row| row[c]).sum();
                let fp = predicted - tp;
                let fn_ = support - tp;
                let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
                ClassMetrics {
                    precision: ratio(tp, predicted),
                    recall: ratio(tp, support),
                    f1: ratio(2 * tp, 2 * tp + fp + fn_),
                    support,
                }
            })
            .collect();
        Self {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            macro_precision: mean_defined(per_class.iter().map(|c| c.precision)),
            macro_recall: mean_defined(per_class.iter().map(|c| c.recall)),
            macro_f1: mean_defined(per_class.iter().map(|c| c.f1)),
            per_class,
            confusion,
        }
    }

    pub fn from_predictions(labels: &[usize], predictions: &[usize], classes: usize) -> Self {
        let mut confusion = vec![vec![0; classes]; classes];
        for (&y, &p) in labels.iter().zip(predictions) {
            confusion[y][p] += 1;
        }
        Self::from_confusion(confusion)
    }
}

/// Metrics of `net` on `samples`. Works for float and quantized weights.
pub fn evaluate<W: LinearOp>(net: &Network<W>, samples: &[&SequenceSample]) -> Result<Metrics, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let predictions = samples
        .iter()
        .map(|s| net.predict(&s.features).map(|(c, _)| c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Metrics::from_predictions(&labels, &predictions, net.dims.classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_two_class_example() {
        let m = Metrics::from_confusion(vec![vec![3, 1], vec![2, 4]]);
        assert_eq!(m.accuracy, 0.7);
        assert_eq!(m.per_class[0].precision, Some(3.0 / 5.0));
        assert_eq!(m.per_class[0].recall, Some(3.0 / 4.0));
        assert_eq!(m.per_class[1].precision, Some(4.0 / 5.0));
        assert_eq!(m.per_class[1].recall, Some(4.0 / 6.0));
        assert_eq!(m.per_class[0].support, 4);
        let p = 0.6;
        let r = 0.75;
        assert!((m.per_class[0].f1.unwrap() - 2.0 * p * r / (p + r)).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 2, 2, 1, 0, 3];
        let m = Metrics::from_predictions(&labels, &labels, 4);
        assert_eq!(m.accuracy, 1.0);
        assert!(m.per_class.iter().all(|c| c.f1 == Some(1.0)));
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn single_class_test_set() {
        let m = Metrics::from_predictions(&[2, 2, 2], &[2, 2, 2], 3);
        assert_eq!(m.per_class[2].precision, Some(1.0));
        assert_eq!(m.per_class[2].recall, Some(1.0));
        assert_eq!(m.per_class[0].precision, None);
        assert_eq!(m.per_class[0].f1, None);
        assert_eq!(m.macro_f1, 1.0);
    }
}
