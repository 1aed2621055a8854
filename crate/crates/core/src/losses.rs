//! Temporal consistency contrast, top-K MIL and the joint objective.

use crate::autodiff::{cosine_matrix, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Norm clamp used by the cosine similarity inside the contrast loss.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Contrast temperature.
    pub tau: f64,
    /// Number of top scores averaged by the MIL loss.
    pub k: usize,
    /// Weight of the contrast term.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            k: 9,
            lambda: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.tau)));
        }
        if self.k == 0 {
            return Err(Error::config("top-K needs K ≥ 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Within-video contrast over the weighted per-pair features (each `T×D`).
///
/// For every snippet `t`, pair `p` and other pair `q ≠ p`, adds
/// `−log softmax_k(φ(p_t, q_k)/τ)[t]`; the total is divided by `N·T`, where
/// `N` is the number of pairs.
pub fn tcc_loss<'g, S: Scalar>(pairs: &[Var<'g, S>], tau: f64) -> Result<Var<'g, S>> {
    if pairs.len() < 2 {
        return Err(Error::contract(format!(
            "contrast needs at least 2 fused pairs, got {}",
            pairs.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let shape = pairs[0].shape();
    if shape.len() != 2 || pairs.iter().any(|p| p.shape() != shape) {
        return Err(Error::dim("contrast inputs must all be T×D with the same shape"));
    }
    let t = shape[0];
    let diagonal: Vec<usize> = (0..t).map(|i| i * t + i).collect();
    let inv_tau = S::lit(1.0 / tau);
    let mut terms = Vec::with_capacity(pairs.len() * (pairs.len() - 1));
    for (i, &anchor) in pairs.iter().enumerate() {
        for (j, &other) in pairs.iter().enumerate() {
            if i == j {
                continue;
            }
            let logits = cosine_matrix(anchor, other, S::lit(COSINE_EPS))?.scale(inv_tau);
            terms.push(logits.log_softmax_rows().gather(&diagonal)?.sum());
        }
    }
    let total = terms[1..].iter().try_fold(terms[0], |acc, &v| acc.add(v))?;
    let norm = S::from_usize_lossy(pairs.len() * t);
    Ok(total.scale(-S::one() / norm))
}

/// Indices of the `k` largest entries, ties resolved by position.
pub fn top_k_indices<S: Scalar>(values: &[S], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k.min(values.len()));
    idx
}

/// Binary cross-entropy of the mean of the `min(k, T)` highest snippet scores.
pub fn mil_topk_loss<'g, S: Scalar>(scores: Var<'g, S>, label: bool, k: usize) -> Result<Var<'g, S>> {
    let values = scores.value();
    if values.ndim() != 1 {
        return Err(Error::dim(format!("scores must be a vector, got {:?}", values.shape())));
    }
    if k == 0 {
        return Err(Error::config("top-K needs K ≥ 1"));
    }
    if let Some(bad) = values.data().iter().find(|&&s| !(s > S::zero() && s < S::one())) {
        return Err(Error::Domain(format!("snippet score {bad} outside (0, 1)")));
    }
    let top = top_k_indices(values.data(), k);
    let mean = scores.gather(&top)?.mean();
    if label {
        Ok(mean.log()?.neg())
    } else {
        Ok(mean.neg().shift(S::one()).log()?.neg())
    }
}

/// `mil + lambda · tcc`.
pub fn total_loss<'g, S: Scalar>(mil: Var<'g, S>, tcc: Var<'g, S>, lambda: f64) -> Result<Var<'g, S>> {
    mil.add(tcc.scale(S::lit(lambda)))
}
