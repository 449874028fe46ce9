//! Depth-ordered forward masking process and its closed-form distributions.
//!
//! Masking always removes the deepest remaining tokens of a position, so a
//! grid's mask is fully described by the per-position masked counts. The
//! number of tokens masked per position follows a multivariate
//! hypergeometric law with capacity `D` per position.

mod grid;
pub mod hypergeom;
mod schedule;

use rand::Rng;

pub use grid::{MaskState, Token, TokenGrid, MASK};
pub use schedule::{Schedule, DEFAULT_EXP_LAMBDA};

use crate::error::{Error, Result};

/// Log-probability with an explicit marker for zero-probability events.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LogProb {
    Value(f64),
    Impossible,
}

impl LogProb {
    /// `−∞` for impossible events.
    pub fn value(self) -> f64 {
        match self {
            LogProb::Value(v) => v,
            LogProb::Impossible => f64::NEG_INFINITY,
        }
    }

    pub fn is_impossible(self) -> bool {
        matches!(self, LogProb::Impossible)
    }

    fn from_option(v: Option<f64>) -> Self {
        v.map_or(LogProb::Impossible, LogProb::Value)
    }
}

/// Masks `n` of the `L·D` tokens, drawn without replacement; each position
/// loses its deepest `k_i` depths.
pub fn binary_mask<R: Rng + ?Sized>(
    n: usize,
    len: usize,
    depth: usize,
    rng: &mut R,
) -> Result<MaskState> {
    if n > len * depth {
        return Err(Error::invalid(format!(
            "cannot mask {n} of {} tokens",
            len * depth
        )));
    }
    let counts = hypergeom::sample_multivariate(rng, &vec![depth; len], n);
    MaskState::from_counts(depth, counts)
}

/// Reveals tokens until `n_target` remain masked. How many to reveal per
/// position is hypergeometric with capacity `q_i`; the shallowest masked
/// depths are revealed first.
pub fn binary_unmask<R: Rng + ?Sized>(
    state: &MaskState,
    n_target: usize,
    rng: &mut R,
) -> Result<MaskState> {
    let total = state.total_masked();
    if n_target > total {
        return Err(Error::invalid(format!(
            "target of {n_target} masked exceeds the {total} currently masked"
        )));
    }
    let reveal = hypergeom::sample_multivariate(rng, state.masked_counts(), total - n_target);
    let mut next = state.clone();
    for (i, &k) in reveal.iter().enumerate() {
        next.reveal(i, k);
    }
    next.step += 1;
    Ok(next)
}

/// `ln q(k^{(t+1)} | x^{(t)})`: probability of newly masking `k_next[i]` tokens
/// at each position given the current state.
pub fn forward_step_logprob(k_next: &[usize], state: &MaskState) -> Result<LogProb> {
    if k_next.len() != state.len() {
        return Err(Error::Dimension {
            expected: state.len(),
            found: k_next.len(),
        });
    }
    let capacity: Vec<usize> = (0..state.len()).map(|i| state.visible(i)).collect();
    Ok(LogProb::from_option(hypergeom::ln_pmf_multivariate(
        &capacity, k_next,
    )))
}

/// `ln q(x^{(t)} | x^{(0)})` for cumulative masked counts `counts_t` summing to `n_cum`.
pub fn marginal_logprob(counts_t: &[usize], n_cum: usize, len: usize, depth: usize) -> Result<LogProb> {
    if counts_t.len() != len {
        return Err(Error::Dimension {
            expected: len,
            found: counts_t.len(),
        });
    }
    let sum: usize = counts_t.iter().sum();
    if sum != n_cum {
        return Err(Error::invalid(format!(
            "counts sum to {sum}, expected {n_cum}"
        )));
    }
    Ok(LogProb::from_option(hypergeom::ln_pmf_multivariate(
        &vec![depth; len],
        counts_t,
    )))
}

/// `ln q(x^{(t)} | x^{(t+1)}, x^{(0)})`: probability that the last forward step
/// masked `counts_t1 − counts_t` at each position.
pub fn posterior_logprob(
    counts_t: &[usize],
    counts_t1: &[usize],
    n_cum_t1: usize,
    n_step: usize,
) -> Result<LogProb> {
    if counts_t.len() != counts_t1.len() {
        return Err(Error::Dimension {
            expected: counts_t1.len(),
            found: counts_t.len(),
        });
    }
    let cum: usize = counts_t1.iter().sum();
    if cum != n_cum_t1 {
        return Err(Error::invalid(format!(
            "counts at t+1 sum to {cum}, expected {n_cum_t1}"
        )));
    }
    if counts_t.iter().zip(counts_t1).any(|(a, b)| a > b) {
        return Ok(LogProb::Impossible);
    }
    let step: Vec<usize> = counts_t1.iter().zip(counts_t).map(|(b, a)| b - a).collect();
    if step.iter().sum::<usize>() != n_step {
        return Err(Error::invalid(format!(
            "step masks {} tokens, expected {n_step}",
            step.iter().sum::<usize>()
        )));
    }
    Ok(LogProb::from_option(hypergeom::ln_pmf_multivariate(
        counts_t1, &step,
    )))
}

#[cfg(test)]
mod tests;
