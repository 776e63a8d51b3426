//! Top-1 accuracy.

use crate::domains::Dataset;
use crate::error::Result;
use crate::nn::GatedModel;
use crate::scalar::Scalar;

const EVAL_CHUNK: usize = 256;

/// Percentage of `indices` whose predicted class equals the label. Empty index sets score 0.
pub fn accuracy<S: Scalar>(model: &GatedModel<S>, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let preds = model.predict(&dataset.gather::<S>(chunk))?;
        correct += preds.iter().zip(chunk).filter(|(&p, &i)| p == dataset.labels[i]).count();
    }
    Ok(100.0 * correct as f64 / indices.len() as f64)
}

/// Accuracy from predictions and labels directly.
pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * correct as f64 / labels.len() as f64
}
