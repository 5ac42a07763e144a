//! Connectionist temporal classification in log space.
//!
//! The forward/backward recursions run over the blank-extended label
//! sequence `l' = [b, y1, b, y2, ..., yU, b]`. `alpha[t][s]` includes the
//! emission at frame `t`; `beta[t][s]` is the log-probability of finishing
//! from state `s` after frame `t` and excludes it, so state occupancy is
//! `exp(alpha + beta - log P)`.

use ndarray::{Array2, ArrayView2};

use super::LossError;

/// Upper bound on `V^T` for [`ctc_loss_bruteforce`].
pub const BRUTEFORCE_MAX_PATHS: u128 = 1_000_000;

/// Negative log-likelihood of a target under a frame-wise distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtcLoss {
    pub value: f64,
    /// No frame path collapses to the target (too few frames). `value` is `+inf`.
    pub infeasible: bool,
}

impl CtcLoss {
    fn infeasible() -> Self {
        Self {
            value: f64::INFINITY,
            infeasible: true,
        }
    }
}

#[inline]
pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Minimum number of frames needed to emit `target`: one per label plus a
/// separating blank between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(target: &[usize], blank: usize, vocab: usize) -> Result<(), LossError> {
    if blank >= vocab {
        return Err(LossError::InvalidInput(format!(
            "blank index {blank} outside vocabulary of size {vocab}"
        )));
    }
    if let Some(pos) = target.iter().position(|&t| t == blank) {
        return Err(LossError::InvalidInput(format!(
            "target contains blank at position {pos}"
        )));
    }
    if let Some(&t) = target.iter().find(|&&t| t >= vocab) {
        return Err(LossError::InvalidInput(format!(
            "target index {t} outside vocabulary"
        )));
    }
    Ok(())
}

fn extended(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &t in target {
        ext.push(t);
        ext.push(blank);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn forward(log_probs: ArrayView2<f64>, ext: &[usize], blank: usize) -> Array2<f64> {
    let frames = log_probs.nrows();
    let states = ext.len();
    let mut alpha = Array2::from_elem((frames, states), f64::NEG_INFINITY);
    alpha[[0, 0]] = log_probs[[0, ext[0]]];
    if states > 1 {
        alpha[[0, 1]] = log_probs[[0, ext[1]]];
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_add(acc, alpha[[t - 1, s - 1]]);
            }
            if can_skip(ext, s, blank) {
                acc = log_add(acc, alpha[[t - 1, s - 2]]);
            }
            if acc != f64::NEG_INFINITY {
                alpha[[t, s]] = acc + log_probs[[t, ext[s]]];
            }
        }
    }
    alpha
}

fn backward(log_probs: ArrayView2<f64>, ext: &[usize], blank: usize) -> Array2<f64> {
    let frames = log_probs.nrows();
    let states = ext.len();
    let mut beta = Array2::from_elem((frames, states), f64::NEG_INFINITY);
    beta[[frames - 1, states - 1]] = 0.0;
    if states > 1 {
        beta[[frames - 1, states - 2]] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let step = |next: usize| beta[[t + 1, next]] + log_probs[[t + 1, ext[next]]];
            let mut acc = step(s);
            if s + 1 < states {
                acc = log_add(acc, step(s + 1));
            }
            if s + 2 < states && can_skip(ext, s + 2, blank) {
                acc = log_add(acc, step(s + 2));
            }
            beta[[t, s]] = acc;
        }
    }
    beta
}

fn total_log_prob(alpha: &Array2<f64>) -> f64 {
    let last = alpha.nrows() - 1;
    let states = alpha.ncols();
    let mut lp = alpha[[last, states - 1]];
    if states > 1 {
        lp = log_add(lp, alpha[[last, states - 2]]);
    }
    lp
}

/// CTC loss `-ln sum_{pi in B^-1(y)} prod_t p_t(pi_t)` from `T x V` log-probabilities.
pub fn ctc_loss(
    log_probs: ArrayView2<f64>,
    target: &[usize],
    blank: usize,
) -> Result<CtcLoss, LossError> {
    check_target(target, blank, log_probs.ncols())?;
    if log_probs.nrows() == 0 || log_probs.nrows() < min_frames(target) {
        return Ok(CtcLoss::infeasible());
    }
    let ext = extended(target, blank);
    let alpha = forward(log_probs, &ext, blank);
    let lp = total_log_prob(&alpha);
    if lp == f64::NEG_INFINITY {
        return Ok(CtcLoss::infeasible());
    }
    Ok(CtcLoss {
        value: -lp,
        infeasible: false,
    })
}

/// Loss together with its gradient with respect to the log-probabilities.
///
/// The gradient is `-gamma(t, k)`, the negated posterior occupancy of symbol
/// `k` at frame `t`. Infeasible targets return a zero gradient.
pub fn ctc_loss_and_grad(
    log_probs: ArrayView2<f64>,
    target: &[usize],
    blank: usize,
) -> Result<(CtcLoss, Array2<f64>), LossError> {
    check_target(target, blank, log_probs.ncols())?;
    let mut grad = Array2::zeros(log_probs.raw_dim());
    if log_probs.nrows() == 0 || log_probs.nrows() < min_frames(target) {
        return Ok((CtcLoss::infeasible(), grad));
    }
    let ext = extended(target, blank);
    let alpha = forward(log_probs, &ext, blank);
    let lp = total_log_prob(&alpha);
    if lp == f64::NEG_INFINITY {
        return Ok((CtcLoss::infeasible(), grad));
    }
    let beta = backward(log_probs, &ext, blank);
    for t in 0..log_probs.nrows() {
        for (s, &k) in ext.iter().enumerate() {
            let occ = alpha[[t, s]] + beta[[t, s]] - lp;
            if occ > f64::NEG_INFINITY {
                grad[[t, k]] -= occ.exp();
            }
        }
    }
    Ok((
        CtcLoss {
            value: -lp,
            infeasible: false,
        },
        grad,
    ))
}

/// Collapse rule: merge consecutive repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Exhaustive CTC loss: enumerates every one of the `V^T` frame paths.
///
/// Takes probabilities (not logs). Used as the reference for [`ctc_loss`].
pub fn ctc_loss_bruteforce(
    probs: ArrayView2<f64>,
    target: &[usize],
    blank: usize,
) -> Result<f64, LossError> {
    let (frames, vocab) = probs.dim();
    check_target(target, blank, vocab)?;
    let paths = (vocab as u128)
        .checked_pow(frames as u32)
        .unwrap_or(u128::MAX);
    if paths > BRUTEFORCE_MAX_PATHS {
        return Err(LossError::TooLarge { paths });
    }
    let mut path = vec![0usize; frames];
    let mut total = 0.0;
    for _ in 0..paths {
        if collapse(&path, blank) == target {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &k)| probs[[t, k]])
                .product::<f64>();
        }
        // odometer increment
        for digit in path.iter_mut().rev() {
            *digit += 1;
            if *digit < vocab {
                break;
            }
            *digit = 0;
        }
    }
    Ok(-total.ln())
}
