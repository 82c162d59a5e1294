//! Small numeric helpers shared across modules.

/// Logits are clamped to this magnitude before any sigmoid/log-sigmoid so
/// probabilities stay strictly inside (0, 1) and log-likelihoods stay finite.
pub const LOGIT_CLAMP: f64 = 35.0;

pub fn clamp_logit(l: f64) -> f64 {
    l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log(sigmoid(x)) = -log(1 + exp(-x)).
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Inverse of `sigmoid` for p in (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// FNV-1a over the global seed and a record id, giving each record its own
/// stable RNG stream regardless of record order.
pub fn derive_seed(global_seed: u64, record_id: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for byte in global_seed.to_le_bytes() {
        h = (h ^ byte as u64).wrapping_mul(PRIME);
    }
    for byte in record_id.as_bytes() {
        h = (h ^ *byte as u64).wrapping_mul(PRIME);
    }
    h
}

/// Batch-means Monte-Carlo standard error of the mean of a (possibly
/// autocorrelated) chain of scalar draws. Splits the chain into up to
/// `max_batches` equal batches and uses the spread of batch means.
pub fn batch_means_mcse(chain: &[f64], max_batches: usize) -> f64 {
    let s = chain.len();
    if s < 4 {
        return f64::INFINITY;
    }
    let n_batches = max_batches.clamp(2, s / 2);
    let batch_len = s / n_batches;
    let used = n_batches * batch_len;
    let mut means = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let start = b * batch_len;
        let sum: f64 = chain[start..start + batch_len].iter().sum();
        means.push(sum / batch_len as f64);
    }
    let grand = means.iter().sum::<f64>() / n_batches as f64;
    let var = means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>() / (n_batches - 1) as f64;
    // The used-chain mean has variance ~ var(batch mean) / n_batches.
    (var / n_batches as f64).sqrt() * (used as f64 / s as f64)
}
