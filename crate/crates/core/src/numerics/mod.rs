//! Dense matrices, a reverse-mode tape over the operations the losses need,
//! and a finite-difference gradient checker.

mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{finite_diff_check, relative_error, value_and_grad, GradCheckReport, Objective, ParamCheck};
pub use matrix::Matrix;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, SAFE_NORM_EPS};

use crate::error::{Error, Result};

/// Numerically stable softmax of a vector.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut out = x.to_vec();
    tape::softmax_in_place(&mut out);
    Ok(out)
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
///
/// Zero vectors are rejected; see [`cosine_similarity_safe`].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine_impl(a, b, 0.0)
}

/// Cosine similarity with `1e-12` added to each norm, so zero vectors give 0.
pub fn cosine_similarity_safe(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine_impl(a, b, SAFE_NORM_EPS)
}

fn cosine_impl(a: &[f64], b: &[f64], eps: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            left: (1, a.len()),
            right: (1, b.len()),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    let na2 = a.iter().map(|v| v * v).sum::<f64>();
    let nb2 = b.iter().map(|v| v * v).sum::<f64>();
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let denom = if eps == 0.0 {
        if na2 == 0.0 || nb2 == 0.0 {
            return Err(Error::ZeroNorm);
        }
        (na2 * nb2).sqrt()
    } else {
        (na2.sqrt() + eps) * (nb2.sqrt() + eps)
    };
    Ok((dot / denom).clamp(-1.0, 1.0))
}
