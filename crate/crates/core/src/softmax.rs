//! Numerically stable softmax helpers and the two softmax facts the KL
//! analysis leans on: the L1 Lipschitz constant of softmax and the trace of
//! the categorical softmax Hessian.

/// `log Σ exp(a_v)`, computed with the max shift.
pub fn logsumexp(a: &[f64]) -> f64 {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = a.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

pub fn softmax(a: &[f64]) -> Vec<f64> {
    let lse = logsumexp(a);
    a.iter().map(|&x| (x - lse).exp()).collect()
}

pub fn log_softmax(a: &[f64]) -> Vec<f64> {
    let lse = logsumexp(a);
    a.iter().map(|&x| x - lse).collect()
}

/// `KL(softmax(a) || softmax(b))` for two logit vectors.
pub fn kl_logits(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let lse_a = logsumexp(a);
    let lse_b = logsumexp(b);
    let kl: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let lp = x - lse_a;
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - (y - lse_b))
            }
        })
        .sum();
    kl.max(0.0)
}

/// `‖softmax(a) − softmax(b)‖₁`.
pub fn softmax_l1_distance(a: &[f64], b: &[f64]) -> f64 {
    softmax(a)
        .iter()
        .zip(softmax(b))
        .map(|(p, q)| (p - q).abs())
        .sum()
}

/// Trace of `diag(p) − p pᵀ`, summed entry by entry from the matrix
/// diagonal (not from the closed form), so it can be checked against
/// `1 − ‖p‖₂²`.
pub fn softmax_hessian_trace(p: &[f64]) -> f64 {
    p.iter().map(|&pv| pv - pv * pv).sum()
}
