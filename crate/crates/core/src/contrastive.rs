//! Bidirectional InfoNCE over global image/text embeddings, with optional
//! per-anchor integrity weights.
//!
//! Similarities are cosines (dot products of L2-normalized rows). With
//! weights, anchor `i` uses logits `w_i·⟨·,·⟩/τ` in both directions, i.e. `w_i`
//! acts as an extra inverse temperature for that anchor. Losses are averaged
//! over anchors.

use crate::error::{invalid, Error, Result};
use crate::numerics::{Matrix, Tape, Var};

/// Pooled embeddings of a batch of matched pairs.
#[derive(Clone, Debug)]
pub struct GlobalBatch {
    /// N×D image embeddings.
    pub image: Matrix,
    /// N×D text embeddings.
    pub text: Matrix,
    pub tau: f64,
    pub weights: Option<Vec<f64>>,
}

/// Contrastive losses in both retrieval directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairLoss<T> {
    pub v2t: T,
    pub t2v: T,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("temperature must be positive, got {tau}")))
    }
}

/// Differentiable bidirectional InfoNCE. `weights` is an N×1 column; `None`
/// is equivalent to all ones.
pub fn info_nce_on(tape: &Tape, image: Var, text: Var, weights: Option<Var>, tau: f64) -> Result<PairLoss<Var>> {
    check_tau(tau)?;
    let (n, d) = tape.shape(image);
    if tape.shape(text) != (n, d) {
        return Err(Error::ShapeMismatch {
            op: "info_nce",
            left: (n, d),
            right: tape.shape(text),
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let w = match weights {
        Some(w) => {
            if tape.shape(w) != (n, 1) {
                return Err(Error::ShapeMismatch {
                    op: "info_nce weights",
                    left: (n, 1),
                    right: tape.shape(w),
                });
            }
            if let Some(bad) = tape.value(w).data().iter().find(|x| !(**x > 0.0 && x.is_finite())) {
                return Err(invalid(format!("integrity weights must be positive, got {bad}")));
            }
            w
        }
        None => tape.constant(Matrix::filled(n, 1, 1.0)),
    };
    let vn = tape.normalize_rows(image)?;
    let tn = tape.normalize_rows(text)?;
    let sim = tape.matmul_nt(vn, tn);
    let diag: Vec<usize> = (0..n).collect();
    let direction = |s: Var| {
        let logits = tape.scale(tape.mul_col(s, w), 1.0 / tau);
        let pos = tape.pick_per_row(tape.log_softmax_rows(logits), &diag);
        tape.scale(tape.mean(pos), -1.0)
    };
    let v2t = direction(sim);
    let t2v = direction(tape.transpose(sim));
    Ok(PairLoss { v2t, t2v })
}

fn eval(batch: &GlobalBatch, weights: Option<&[f64]>) -> Result<PairLoss<f64>> {
    let tape = Tape::new();
    let v = tape.constant(batch.image.clone());
    let t = tape.constant(batch.text.clone());
    let w = weights.map(|w| tape.constant(Matrix::column_vector(w.to_vec())));
    let l = info_nce_on(&tape, v, t, w, batch.tau)?;
    Ok(PairLoss {
        v2t: tape.scalar(l.v2t),
        t2v: tape.scalar(l.t2v),
    })
}

/// Plain InfoNCE; any weights on the batch are ignored.
pub fn info_nce(batch: &GlobalBatch) -> Result<PairLoss<f64>> {
    eval(batch, None)
}

/// Integrity-weighted InfoNCE. The batch must carry positive weights.
pub fn weighted_info_nce(batch: &GlobalBatch) -> Result<PairLoss<f64>> {
    let w = batch
        .weights
        .as_deref()
        .ok_or_else(|| invalid("weighted_info_nce requires weights"))?;
    eval(batch, Some(w))
}
