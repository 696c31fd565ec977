use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean cross-entropy of `softmax(logits)` against integer labels.
///
/// Returns the loss and `dlogits = (softmax - onehot) / B`. Rows are shifted
/// by their maximum before exponentiation.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [b, k] = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Input(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!("label {bad} outside [0, {k})")));
    }
    let mut grad = vec![0.0; b * k];
    let mut total = 0.0;
    for ((row, g), &label) in logits
        .data()
        .chunks_exact(k)
        .zip(grad.chunks_exact_mut(k))
        .zip(labels)
    {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - max).exp();
            z += *gi;
        }
        total += z.ln() - (row[label] - max);
        for gi in g.iter_mut() {
            *gi /= z * b as f64;
        }
        g[label] -= 1.0 / b as f64;
    }
    Ok((total / b as f64, Tensor::new(vec![b, k], grad)?))
}
