//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSlice, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::scalar::Scalar;

const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Recall of each class; 0 for classes absent from the test set.
    pub per_class_accuracy: [f64; NUM_CLASSES],
    /// `confusion[true][predicted]`, each represented row normalized to 1.
    pub confusion: [[f64; NUM_CLASSES]; NUM_CLASSES],
    /// Raw `counts[true][predicted]`.
    pub counts: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub support: [usize; NUM_CLASSES],
}

impl Metrics {
    pub fn from_predictions(labels: &[u8], predicted: &[usize]) -> Result<Self> {
        if labels.len() != predicted.len() {
            return Err(Error::shape("Metrics", labels.len(), predicted.len()));
        }
        if labels.is_empty() {
            return Err(Error::input("cannot evaluate on an empty set"));
        }
        let mut counts = [[0usize; NUM_CLASSES]; NUM_CLASSES];
        for (&t, &p) in labels.iter().zip(predicted) {
            counts[t as usize][p] += 1;
        }
        let mut support = [0; NUM_CLASSES];
        let mut confusion = [[0.0; NUM_CLASSES]; NUM_CLASSES];
        let mut per_class_accuracy = [0.0; NUM_CLASSES];
        let mut correct = 0;
        for t in 0..NUM_CLASSES {
            support[t] = counts[t].iter().sum();
            correct += counts[t][t];
            if support[t] > 0 {
                for p in 0..NUM_CLASSES {
                    confusion[t][p] = counts[t][p] as f64 / support[t] as f64;
                }
                per_class_accuracy[t] = counts[t][t] as f64 / support[t] as f64;
            }
        }
        Ok(Self {
            accuracy: correct as f64 / labels.len() as f64,
            per_class_accuracy,
            confusion,
            counts,
            support,
        })
    }

    /// Accuracy over the samples whose true class lies in `classes`, still
    /// judged by the full 10-way argmax.
    pub fn group_accuracy(&self, classes: impl IntoIterator<Item = usize>) -> f64 {
        let (mut hit, mut total) = (0, 0);
        for c in classes {
            hit += self.counts[c][c];
            total += self.support[c];
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }
}

/// Argmax predictions of `mlp` on `test`, scored against its labels.
pub fn evaluate<T: Scalar>(mlp: &Mlp<T>, test: &DatasetSlice<T>) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::input("cannot evaluate on an empty set"));
    }
    let rows: Vec<usize> = (0..test.len()).collect();
    let mut predicted = Vec::with_capacity(test.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        predicted.extend(mlp.predict(&test.images().select_rows(chunk))?);
    }
    Metrics::from_predictions(test.labels(), &predicted)
}
