use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Per class; zero when the class is never predicted.
    pub precision: Vec<f64>,
    /// Per class; zero when the class never occurs.
    pub recall: Vec<f64>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    /// Mean cross-entropy over the evaluated set.
    pub loss: f64,
}

impl Metrics {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], num_classes: usize, loss: f64) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::Config(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&p, &l) in predictions.iter().zip(labels) {
            if p >= num_classes || l >= num_classes {
                return Err(Error::Config(format!("class index out of range for {num_classes} classes")));
            }
            confusion[l][p] += 1;
        }
        let total = labels.len();
        let correct: usize = (0..num_classes).map(|k| confusion[k][k]).sum();
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = (0..num_classes)
            .map(|k| ratio(confusion[k][k], (0..num_classes).map(|r| confusion[r][k]).sum()))
            .collect();
        let recall = (0..num_classes)
            .map(|k| ratio(confusion[k][k], confusion[k].iter().sum()))
            .collect();
        Ok(Self {
            accuracy: ratio(correct, total),
            precision,
            recall,
            confusion,
            loss,
        })
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn errors(&self) -> usize {
        self.total() - (0..self.confusion.len()).map(|k| self.confusion[k][k]).sum::<usize>()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 2, 1];
        let m = Metrics::from_predictions(&labels, &labels, 3, 0.0).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.confusion, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        assert_eq!(m.errors(), 0);
    }

    #[test]
    fn constant_prediction_on_balanced_labels() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let m = Metrics::from_predictions(&[0; 40], &labels, 4, 0.0).unwrap();
        assert_eq!(m.accuracy, 0.25);
        assert_eq!(m.confusion.iter().map(|r| r[0]).sum::<usize>(), 40);
        assert_eq!(m.errors(), 30);
        assert_eq!(m.precision, vec![0.25, 0.0, 0.0, 0.0]);
        assert_eq!(m.recall, vec![1.0, 0.0, 0.0, 0.0]);
        for (k, row) in m.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), labels.iter().filter(|&&l| l == k).count());
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
