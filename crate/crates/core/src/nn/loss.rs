use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::kernels::Real;

fn check_labels(batch: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if batch == 0 || labels.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if labels.len() != batch {
        return Err(Error::shape(
            "cross_entropy",
            format!("{batch} predictions but {} labels", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    Ok(())
}

fn split(predictions: &Tensor) -> (usize, usize) {
    let batch = predictions.rows();
    (batch, predictions.len() / batch)
}

/// Mean negative log-softmax of the labelled class, max-subtracted.
pub fn cross_entropy(predictions: &Tensor, labels: &[usize]) -> Result<f32> {
    let (batch, classes) = split(predictions);
    check_labels(batch, classes, labels)?;
    let data: Vec<f64> = predictions.data().iter().map(|&v| f64::from(v)).collect();
    Ok(mean_nll(&data, classes, labels) as f32)
}

pub(crate) fn mean_nll<T: Real>(logits: &[T], classes: usize, labels: &[usize]) -> T {
    let mut total = T::zero();
    for (row, &label) in logits.chunks(classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += lse - row[label];
    }
    total / T::from(labels.len()).expect("batch size fits the float type")
}

/// Loss and its gradient with respect to the logits.
pub(crate) fn cross_entropy_grad(predictions: &Tensor, labels: &[usize]) -> Result<(f32, Vec<f32>)> {
    let (batch, classes) = split(predictions);
    check_labels(batch, classes, labels)?;
    let mut grad = Vec::with_capacity(predictions.len());
    let mut total = 0.0f64;
    let scale = 1.0 / batch as f64;
    for (row, &label) in predictions.data().chunks(classes).zip(labels) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() + max - f64::from(row[label]);
        for (c, e) in exps.iter().enumerate() {
            let target = if c == label { 1.0 } else { 0.0 };
            grad.push(((e / z - target) * scale) as f32);
        }
    }
    Ok(((total * scale) as f32, grad))
}
