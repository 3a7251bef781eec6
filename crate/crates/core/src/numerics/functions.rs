//! Plain-slice probability and similarity helpers.

use super::tape::softmax_in_place;
use crate::error::{MarioError, Result};

/// Floor applied to `p` inside the logarithm of [`kl_divergence`].
pub const KL_PROB_FLOOR: f64 = 1e-8;

pub const COSINE_EPS: f64 = 1e-12;

pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(MarioError::Contract("softmax of an empty vector".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MarioError::Domain("softmax input is not finite".into()));
    }
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.iter().any(|&v| !(0.0..=1.0 + 1e-9).contains(&v)) || (total - 1.0).abs() > 1e-6 {
        return Err(MarioError::Domain(format!(
            "{what} is not a probability vector (sum {total})"
        )));
    }
    Ok(())
}

/// `KL(q ‖ p) = Σ q_i ln(q_i / p_i)` with `0 ln 0 = 0`. `p` is floored at
/// [`KL_PROB_FLOOR`] inside the log; an exact zero where `q_i > 0` is an error.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> Result<f64> {
    if q.len() != p.len() {
        return Err(MarioError::Contract(format!(
            "kl_divergence: lengths {} and {}",
            q.len(),
            p.len()
        )));
    }
    check_distribution(q, "q")?;
    check_distribution(p, "p")?;
    let mut kl = 0.0;
    for (&qi, &pi) in q.iter().zip(p) {
        if qi == 0.0 {
            continue;
        }
        if pi == 0.0 {
            return Err(MarioError::Domain("p is zero where q has mass".into()));
        }
        kl += qi * (qi.ln() - pi.max(KL_PROB_FLOOR).ln());
    }
    Ok(kl)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MarioError::Contract(format!(
            "cosine_similarity: lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= COSINE_EPS || nb <= COSINE_EPS {
        return Err(MarioError::Domain(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_f32(a: &[f32], b: &[f32]) -> Result<f64> {
    let a: Vec<f64> = a.iter().map(|&x| x as f64).collect();
    let b: Vec<f64> = b.iter().map(|&x| x as f64).collect();
    cosine_similarity(&a, &b)
}

/// First index of the maximum; ties resolve to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}
