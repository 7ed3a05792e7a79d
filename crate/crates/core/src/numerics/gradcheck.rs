//! Central finite-difference verification of tape gradients.

use super::matrix::Matrix;
use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Objective evaluated on a fresh tape with the parameters bound as leaves
/// (in store order). Must return a 1×1 node.
pub trait Objective: Fn(&Tape, &[Var]) -> Result<Var> {}
impl<F: Fn(&Tape, &[Var]) -> Result<Var>> Objective for F {}

/// Result of checking one named parameter.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub objective: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Value and gradient of `objective` with respect to every parameter in `params`.
///
/// Parameters that do not influence the objective get a zero gradient of the
/// same shape.
pub fn value_and_grad(params: &ParamStore, objective: impl Objective) -> Result<(f64, Vec<Matrix>)> {
    let tape = Tape::new();
    let vars = params.bind(&tape);
    let out = objective(&tape, &vars)?;
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let grads = tape.backward(out);
    let g = vars
        .iter()
        .zip(params.values())
        .map(|(v, m)| grads.get_or_zeros(*v, m.shape()))
        .collect();
    Ok((value, g))
}

fn evaluate(params: &ParamStore, objective: &impl Objective) -> Result<f64> {
    let tape = Tape::new();
    let vars = params.bind(&tape);
    let out = objective(&tape, &vars)?;
    let v = tape.scalar(out);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteObjective)
    }
}

/// Compares the tape gradient of `objective` with central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every entry of every parameter.
pub fn finite_diff_check(objective: impl Objective, params: &ParamStore, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(crate::error::invalid("eps must be positive"));
    }
    let (value, analytic) = value_and_grad(params, &objective)?;
    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for (id, name, m) in params.iter() {
        let mut check = ParamCheck {
            name: name.to_string(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..m.len() {
            let orig = m.data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let plus = evaluate(&work, &objective)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let minus = evaluate(&work, &objective)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id.0].data()[k];
            let rel = relative_error(a, numeric);
            if rel > check.max_rel_error || k == 0 {
                check.max_rel_error = rel;
                check.worst_index = k;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        objective: value,
        params: report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamStore::new();
        p.add("theta", Matrix::scalar(3.0));
        let r = finite_diff_check(|t: &Tape, v: &[Var]| Ok(t.mul(v[0], v[0])), &p, 1e-4).unwrap();
        let c = &r.params[0];
        assert_eq!(c.analytic, 6.0);
        assert!((c.numeric - 6.0).abs() < 1e-6);
        assert!(c.max_rel_error < 1e-6);
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let mut p = ParamStore::new();
        p.add("theta", Matrix::from_rows(&[[1.0, -2.0]]).unwrap());
        let r = finite_diff_check(|t: &Tape, _v: &[Var]| Ok(t.constant(Matrix::scalar(4.2))), &p, 1e-4).unwrap();
        assert_eq!(r.params[0].analytic, 0.0);
        assert_eq!(r.params[0].max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let mut p = ParamStore::new();
        p.add("theta", Matrix::scalar(-1.0));
        let err = finite_diff_check(|t: &Tape, v: &[Var]| Ok(t.log(v[0])), &p, 1e-4).unwrap_err();
        assert_eq!(err.to_string(), "objective not finite");
    }

    #[test]
    fn nonpositive_eps_rejected() {
        let mut p = ParamStore::new();
        p.add("theta", Matrix::scalar(1.0));
        assert!(finite_diff_check(|t: &Tape, v: &[Var]| Ok(t.sum(v[0])), &p, 0.0).is_err());
    }
}
