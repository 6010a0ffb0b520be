use crate::error::{check_len, domain, Result};
use crate::ops;

/// `-(1/k) Σ_{t<k} log softmax(logits_t)[targets_t]`, where row `t` of
/// `logits` (`len(targets) × vocab`) scores `targets[t]`.
pub fn cross_entropy_prefix(logits: &[f64], vocab: usize, targets: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(domain("prefix length k must be at least 1"));
    }
    if k > targets.len() {
        return Err(domain(format!(
            "prefix length {k} exceeds {} targets",
            targets.len()
        )));
    }
    check_len(targets.len() * vocab, logits.len())?;
    let total: f64 = (0..k)
        .map(|t| -ops::log_softmax(&logits[t * vocab..(t + 1) * vocab])[targets[t]])
        .sum();
    Ok(total / k as f64)
}

/// Position-weighted cross-entropy `Σ_t weight_t · (-log p_t(target_t))` over
/// rows `offset..offset+len(targets)` of a full `seq_len × vocab` logit
/// matrix. Returns the loss and its gradient with respect to every logit.
pub fn weighted_cross_entropy(
    logits: &[f64],
    vocab: usize,
    offset: usize,
    targets: &[usize],
    weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    check_len(targets.len(), weights.len())?;
    if logits.len() % vocab != 0 || offset + targets.len() > logits.len() / vocab {
        return Err(domain("target rows fall outside the logit matrix"));
    }
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (i, (&y, &wt)) in targets.iter().zip(weights).enumerate() {
        if wt == 0.0 {
            continue;
        }
        let row = offset + i;
        let lp = ops::log_softmax(&logits[row * vocab..(row + 1) * vocab]);
        loss -= wt * lp[y];
        let g = &mut grad[row * vocab..(row + 1) * vocab];
        for (gj, l) in g.iter_mut().zip(&lp) {
            *gj = wt * l.exp();
        }
        g[y] -= wt;
    }
    Ok((loss, grad))
}

/// Uniform `1/k` weights on the first `k` of `len` positions.
pub fn prefix_weights(len: usize, k: usize) -> Vec<f64> {
    let k = k.min(len);
    (0..len)
        .map(|t| if t < k { 1.0 / k as f64 } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let v = 7;
        let logits = vec![0.25; 3 * v];
        let loss = cross_entropy_prefix(&logits, v, &[1, 4, 6], 3).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero() {
        let v = 4;
        let targets = [2, 0, 3];
        let mut logits = vec![-1e3; 3 * v];
        for (t, &y) in targets.iter().enumerate() {
            logits[t * v + y] = 1e3;
        }
        assert_eq!(cross_entropy_prefix(&logits, v, &targets, 3).unwrap(), 0.0);
    }

    #[test]
    fn two_token_hand_value() {
        // p(correct) = 0.5 then 0.25 with V = 2
        let logits = vec![0.0, 0.0, 0.0, 3f64.ln()];
        let loss = cross_entropy_prefix(&logits, 2, &[0, 0], 2).unwrap();
        let want = -(0.5f64.ln() + 0.25f64.ln()) / 2.0;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn only_prefix_positions_count() {
        let logits = vec![0.0, 0.0, 0.0, 50.0];
        let loss = cross_entropy_prefix(&logits, 2, &[0, 0], 1).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bad_prefix_lengths() {
        let logits = vec![0.0; 4];
        assert!(cross_entropy_prefix(&logits, 2, &[0, 1], 0).is_err());
        assert!(cross_entropy_prefix(&logits, 2, &[0, 1], 3).is_err());
    }

    #[test]
    fn weighted_matches_prefix_loss() {
        let v = 3;
        let logits: Vec<f64> = (0..4 * v).map(|i| (i as f64 * 0.7).sin()).collect();
        let targets = [1, 2, 0];
        let (loss, _) = weighted_cross_entropy(&logits, v, 1, &targets, &prefix_weights(3, 2)).unwrap();
        let direct = cross_entropy_prefix(&logits[v..], v, &targets, 2).unwrap();
        assert!((loss - direct).abs() < 1e-14);
    }
}
