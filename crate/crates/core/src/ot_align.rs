//! Sentence-patch matching through optimal transport.
//!
//! Local image features are compared with sentence features (mean of the
//! token features in each sentence) by cosine distance. An inexact proximal
//! point (IPOT) solver couples patches to sentences, and the matching loss is
//! the total transport cost `Σ_jk C_jk Γ_jk`. The plan is held constant when
//! differentiating, so gradients reach the features through `C` only.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{cosine_similarity, Matrix, Tape, Var};

/// Sentence boundaries as disjoint, ordered, nonempty token ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSegments")]
pub struct SentenceSegments {
    ranges: Vec<Range<usize>>,
}

#[derive(Deserialize)]
struct RawSegments {
    ranges: Vec<Range<usize>>,
}

impl TryFrom<RawSegments> for SentenceSegments {
    type Error = Error;

    fn try_from(raw: RawSegments) -> Result<Self> {
        Self::new(raw.ranges)
    }
}

impl SentenceSegments {
    pub fn new(ranges: Vec<Range<usize>>) -> Result<Self> {
        for (k, r) in ranges.iter().enumerate() {
            if r.start >= r.end {
                return Err(invalid(format!("sentence {k} is empty ({r:?})")));
            }
            if k > 0 && ranges[k - 1].end > r.start {
                return Err(invalid(format!("sentence {k} overlaps or precedes sentence {}", k - 1)));
            }
        }
        Ok(Self { ranges })
    }

    /// One sentence per token.
    pub fn singletons(num_tokens: usize) -> Self {
        Self {
            ranges: (0..num_tokens).map(|i| i..i + 1).collect(),
        }
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// Checks every range lies within `0..num_tokens`.
    pub fn validate(&self, num_tokens: usize) -> Result<()> {
        match self.ranges.last() {
            Some(r) if r.end > num_tokens => Err(invalid(format!("sentence range {r:?} exceeds {num_tokens} tokens"))),
            _ => Ok(()),
        }
    }
}

/// Mean-pools token rows of `t_local` (T×D) per sentence, giving S×D.
pub fn aggregate_sentences_on(tape: &Tape, t_local: Var, segments: &SentenceSegments) -> Result<Var> {
    let (t, _) = tape.shape(t_local);
    segments.validate(t)?;
    if segments.is_empty() {
        return Err(Error::EmptyInput);
    }
    let rows: Vec<Var> = segments
        .ranges()
        .iter()
        .map(|r| {
            let idx: Vec<usize> = r.clone().collect();
            tape.mean_rows(tape.gather_rows(t_local, &idx))
        })
        .collect();
    Ok(tape.concat_rows(&rows))
}

pub fn aggregate_sentences(t_local: &Matrix, segments: &SentenceSegments) -> Result<Matrix> {
    let tape = Tape::new();
    let t = tape.constant(t_local.clone());
    let s = aggregate_sentences_on(&tape, t, segments)?;
    Ok(tape.value(s))
}

/// L×S cosine distances `1 − cos(v'_j, t̂_k)`, entries in `[0, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix(pub Matrix);

impl CostMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

/// Differentiable cosine cost between the rows of `v_local` (L×D) and
/// `t_sent` (S×D).
pub fn cost_matrix_on(tape: &Tape, v_local: Var, t_sent: Var) -> Result<Var> {
    let (_, dv) = tape.shape(v_local);
    let (_, dt) = tape.shape(t_sent);
    if dv != dt {
        return Err(Error::ShapeMismatch {
            op: "cost_matrix",
            left: tape.shape(v_local),
            right: tape.shape(t_sent),
        });
    }
    let relabel = |name: &'static str| {
        move |e: Error| match e {
            Error::ZeroNormRow { row, .. } => Error::ZeroNormRow { matrix: name, row },
            other => other,
        }
    };
    let vn = tape.normalize_rows(v_local).map_err(relabel("image features"))?;
    let tn = tape.normalize_rows(t_sent).map_err(relabel("sentence features"))?;
    let cos = tape.matmul_nt(vn, tn);
    Ok(tape.add_scalar(tape.scale(cos, -1.0), 1.0))
}

/// Non-differentiable cost, clamped to `[0, 2]`. Each entry is computed as
/// one cosine so that parallel rows cost exactly 0.
pub fn cost_matrix(v_local: &Matrix, t_sent: &Matrix) -> Result<CostMatrix> {
    if v_local.cols() != t_sent.cols() {
        return Err(Error::ShapeMismatch {
            op: "cost_matrix",
            left: v_local.shape(),
            right: t_sent.shape(),
        });
    }
    for (matrix, m) in [("image features", v_local), ("sentence features", t_sent)] {
        if let Some(row) = m.iter_rows().position(|r| r.iter().all(|&x| x == 0.0)) {
            return Err(Error::ZeroNormRow { matrix, row });
        }
    }
    let mut c = Matrix::zeros(v_local.rows(), t_sent.rows());
    for i in 0..v_local.rows() {
        for j in 0..t_sent.rows() {
            let cos = cosine_similarity(v_local.row(i), t_sent.row(j))?;
            c.set(i, j, (1.0 - cos).clamp(0.0, 2.0));
        }
    }
    Ok(CostMatrix(c))
}

/// IPOT settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IpotConfig {
    /// Proximal step size; the kernel is `exp(−C/β)`.
    pub beta: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    /// Stop once the L1 marginal violation drops below this.
    pub tol: f64,
}

impl Default for IpotConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            outer_iters: 50,
            inner_iters: 1,
            tol: 1e-4,
        }
    }
}

/// Coupling of L patches to S sentences with solver diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub gamma: Matrix,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub iterations_used: usize,
    /// `‖Γ1 − μ‖₁ + ‖Γᵀ1 − ν‖₁`
    pub marginal_error: f64,
    /// `⟨C, Γ⟩` after each outer iteration.
    pub objective_trace: Vec<f64>,
}

impl TransportPlan {
    pub fn objective(&self, cost: &CostMatrix) -> Result<f64> {
        cost.0.frobenius_dot(&self.gamma)
    }
}

pub fn marginal_error(gamma: &Matrix, mu: &[f64], nu: &[f64]) -> f64 {
    let rows: f64 = gamma.row_sums().iter().zip(mu).map(|(s, m)| (s - m).abs()).sum();
    let cols: f64 = gamma.col_sums().iter().zip(nu).map(|(s, n)| (s - n).abs()).sum();
    rows + cols
}

/// IPOT with uniform marginals `μ = 1/L`, `ν = 1/S`.
pub fn ipot(cost: &CostMatrix, cfg: &IpotConfig) -> Result<TransportPlan> {
    let (l, s) = cost.shape();
    if l == 0 || s == 0 {
        return Err(Error::EmptyInput);
    }
    let mu = vec![1.0 / l as f64; l];
    let nu = vec![1.0 / s as f64; s];
    ipot_with_marginals(cost, &mu, &nu, cfg)
}

/// Inexact proximal point iteration for `min ⟨C,Γ⟩` s.t. `Γ1 = μ`, `Γᵀ1 = ν`, `Γ ≥ 0`.
///
/// Each outer step rescales `Q = exp(−C/β) ⊙ Γ` with `inner_iters`
/// Sinkhorn passes; as the number of outer steps grows the plan approaches an
/// unregularized optimum.
pub fn ipot_with_marginals(cost: &CostMatrix, mu: &[f64], nu: &[f64], cfg: &IpotConfig) -> Result<TransportPlan> {
    let c = &cost.0;
    let (l, s) = c.shape();
    if mu.len() != l || nu.len() != s {
        return Err(Error::ShapeMismatch {
            op: "ipot marginals",
            left: (l, s),
            right: (mu.len(), nu.len()),
        });
    }
    if !(cfg.beta > 0.0) {
        return Err(invalid(format!("beta must be positive, got {}", cfg.beta)));
    }
    if cfg.inner_iters == 0 {
        return Err(invalid("inner_iters must be at least 1"));
    }
    if !c.is_finite() {
        return Err(invalid("cost matrix has non-finite entries"));
    }
    let kernel = c.map(|x| (-x / cfg.beta).exp());
    if !kernel.is_finite() {
        return Err(Error::IpotNonFinite { iteration: 0 });
    }
    let mut gamma = Matrix::from_fn(l, s, |i, j| mu[i] * nu[j]);
    let mut trace = Vec::with_capacity(cfg.outer_iters);
    let mut err = marginal_error(&gamma, mu, nu);
    let mut used = 0;
    // The column scaling is carried across outer steps (warm start); resetting
    // it every step leaves a persistent marginal error with one inner pass.
    let mut a = vec![0.0; l];
    let mut b = vec![1.0 / s as f64; s];
    let mut q = Matrix::zeros(l, s);

    for outer in 1..=cfg.outer_iters {
        for ((qv, k), g) in q.data_mut().iter_mut().zip(kernel.data()).zip(gamma.data()) {
            *qv = k * g;
        }
        for _ in 0..cfg.inner_iters {
            // a = μ ⊘ (Qb)
            for i in 0..l {
                let qb: f64 = q.row(i).iter().zip(&b).map(|(x, y)| x * y).sum();
                a[i] = mu[i] / qb;
            }
            // b = ν ⊘ (Qᵀa)
            b.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..l {
                for (bj, qij) in b.iter_mut().zip(q.row(i)) {
                    *bj += qij * a[i];
                }
            }
            for (bj, nj) in b.iter_mut().zip(nu) {
                *bj = nj / *bj;
            }
        }
        for i in 0..l {
            let ai = a[i];
            for ((g, qij), bj) in gamma.row_mut(i).iter_mut().zip(q.row(i)).zip(&b) {
                *g = ai * qij * bj;
            }
        }
        if !gamma.is_finite() {
            return Err(Error::IpotNonFinite { iteration: outer });
        }
        used = outer;
        trace.push(c.frobenius_dot(&gamma)?);
        err = marginal_error(&gamma, mu, nu);
        if err < cfg.tol {
            break;
        }
    }

    Ok(TransportPlan {
        gamma,
        mu: mu.to_vec(),
        nu: nu.to_vec(),
        iterations_used: used,
        marginal_error: err,
        objective_trace: trace,
    })
}

/// Differentiable matching loss `Σ_jk C_jk Γ_jk` with `Γ` held constant.
pub fn spm_loss_on(tape: &Tape, cost: Var, gamma: &Matrix) -> Result<Var> {
    if tape.shape(cost) != gamma.shape() {
        return Err(Error::ShapeMismatch {
            op: "spm_loss",
            left: tape.shape(cost),
            right: gamma.shape(),
        });
    }
    let g = tape.constant(gamma.clone());
    Ok(tape.sum(tape.mul(cost, g)))
}

pub fn spm_loss(cost: &CostMatrix, plan: &TransportPlan) -> Result<f64> {
    if cost.shape() != plan.gamma.shape() {
        return Err(Error::ShapeMismatch {
            op: "spm_loss",
            left: cost.shape(),
            right: plan.gamma.shape(),
        });
    }
    cost.0.frobenius_dot(&plan.gamma)
}
