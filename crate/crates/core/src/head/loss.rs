use ndarray::Array2;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `weight * -log softmax(logits)[label]`, via log-sum-exp.
pub fn weighted_cross_entropy(logits: &[f64], label: usize, weight: f64) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    weight * (lse - logits[label])
}

/// Mean weighted cross-entropy over a batch and its gradient w.r.t. the
/// logits.
pub fn weighted_cross_entropy_batch(
    logits: &Array2<f64>,
    labels: &[usize],
    class_weights: &[f64],
) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, (row, &label)) in logits.rows().into_iter().zip(labels).enumerate() {
        let z = row.to_vec();
        let w = class_weights[label];
        total += weighted_cross_entropy(&z, label, w);
        let p = softmax(&z);
        for (c, pc) in p.into_iter().enumerate() {
            let target = if c == label { 1.0 } else { 0.0 };
            grad[[i, c]] = w * (pc - target) / n;
        }
    }
    (total / n, grad)
}
