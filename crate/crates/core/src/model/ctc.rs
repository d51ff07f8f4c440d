//! Connectionist temporal classification: log-space forward-backward loss,
//! an enumeration oracle, and greedy decoding.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Minimum frame count for `target`: one frame per label plus one blank
/// between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn validate(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<()> {
    if log_probs.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "CTC expects T×V log-probabilities, got shape {:?}",
            log_probs.shape()
        )));
    }
    let v = log_probs.cols();
    if blank >= v {
        return Err(Error::InvalidArgument(format!("blank {blank} outside vocabulary of {v}")));
    }
    if let Some(&bad) = target.iter().find(|&&y| y >= v || y == blank) {
        return Err(Error::InvalidArgument(format!(
            "CTC target token {bad} is blank or outside vocabulary of {v}"
        )));
    }
    Ok(())
}

/// `-ln P(target | log_probs)` and its gradient with respect to `log_probs`.
///
/// Returns `+inf` with a zero gradient when the target cannot fit in the
/// available frames.
pub fn ctc_forward_backward(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<(f64, Vec<f64>)> {
    validate(log_probs, target, blank)?;
    let (t_len, v) = (log_probs.rows(), log_probs.cols());
    if t_len < min_frames(target) {
        return Ok((f64::INFINITY, vec![0.0; t_len * v]));
    }
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    let s_len = ext.len();
    let lp = |t: usize, s: usize| log_probs.data()[t * v + ext[s]];
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = lse2(acc, prev[s - 2]);
            }
            cur[s] = if acc == ninf { ninf } else { acc + lp(t, s) };
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = if s_len > 1 {
        lse2(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_p == ninf {
        return Ok((f64::INFINITY, vec![0.0; t_len * v]));
    }

    // beta[t][s]: log-probability of completing the path from state s at
    // frame t, excluding the emission at t.
    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut acc = beta[next + s] + lp(t + 1, s);
            if s + 1 < s_len {
                acc = lse2(acc, beta[next + s + 1] + lp(t + 1, s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = lse2(acc, beta[next + s + 2] + lp(t + 1, s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s];
            if occ > ninf {
                grad[t * v + ext[s]] -= (occ - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Differentiable CTC loss on a `T×V` node of log-probabilities.
pub fn ctc_loss(g: &mut Graph, log_probs: Var, target: &[usize], blank: usize) -> Result<Var> {
    let (loss, grad) = ctc_forward_backward(g.value(log_probs), target, blank)?;
    Ok(g.fused_scalar(log_probs, loss, grad)?)
}

pub const BRUTE_FORCE_MAX_FRAMES: usize = 8;
pub const BRUTE_FORCE_MAX_VOCAB: usize = 5;

/// Collapses a frame-level path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// CTC loss by summing the probability of every frame-label path whose
/// collapse equals `target`.
pub fn ctc_brute_force(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<f64> {
    validate(log_probs, target, blank)?;
    let (t_len, v) = (log_probs.rows(), log_probs.cols());
    if t_len > BRUTE_FORCE_MAX_FRAMES || v > BRUTE_FORCE_MAX_VOCAB {
        return Err(Error::InvalidArgument(format!(
            "enumeration bounded to T <= {BRUTE_FORCE_MAX_FRAMES} and V <= {BRUTE_FORCE_MAX_VOCAB}, got T={t_len} V={v}"
        )));
    }
    let mut path = vec![0usize; t_len];
    let mut total = 0.0;
    loop {
        if collapse(&path, blank) == target {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| log_probs.data()[t * v + k]).sum();
            total += lp.exp();
        }
        // Odometer increment over V^T paths.
        let mut i = 0;
        loop {
            if i == t_len {
                return Ok(-total.ln());
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Per-frame argmax (lowest index on ties), then [`collapse`].
pub fn greedy_ctc_decode(log_probs: &Tensor, blank: usize) -> Vec<usize> {
    let path: Vec<usize> = (0..log_probs.rows())
        .map(|t| {
            let row = log_probs.row(t);
            (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
        })
        .collect();
    collapse(&path, blank)
}
