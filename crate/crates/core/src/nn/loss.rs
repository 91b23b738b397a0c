use crate::tensor::{softmax, Tensor};

/// Probabilities are floored at this value before taking logarithms in KL.
pub const KL_PROB_FLOOR: f64 = 1e-12;

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// `KL(softmax(p) ‖ softmax(q))` in nats for one pair of logit rows.
pub fn kl_logits(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    kl_logits_with_grad(p_logits, q_logits, false).0
}

/// KL value and, optionally, its gradient with respect to `p_logits`.
pub(crate) fn kl_logits_with_grad(p_logits: &[f64], q_logits: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
    let p = softmax(p_logits);
    let q = softmax(q_logits);
    // a_i = ln p_i − ln q_i with both probabilities floored
    let a: Vec<f64> = p
        .iter()
        .zip(&q)
        .map(|(&pi, &qi)| pi.max(KL_PROB_FLOOR).ln() - qi.max(KL_PROB_FLOOR).ln())
        .collect();
    let kl: f64 = p.iter().zip(&a).map(|(pi, ai)| pi * ai).sum();
    if !want_grad {
        return (kl.max(0.0), Vec::new());
    }
    let grad = p.iter().zip(&a).map(|(pi, ai)| pi * (ai - kl)).collect();
    (kl.max(0.0), grad)
}

/// Mean over rows of `KL(softmax(p) ‖ softmax(q))`. The first argument is the
/// perturbed (ablated) distribution.
pub fn kl_divergence(p_logits: &Tensor, q_logits: &Tensor) -> f64 {
    assert_eq!(p_logits.shape(), q_logits.shape(), "KL needs equal shapes");
    let n = p_logits.shape()[0].max(1);
    (0..p_logits.shape()[0])
        .map(|i| kl_logits(p_logits.row(i), q_logits.row(i)))
        .sum::<f64>()
        / n as f64
}

/// Cross-entropy loss and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let lp = log_softmax(logits);
    let mut grad: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    grad[label] -= 1.0;
    (-lp[label], grad)
}
