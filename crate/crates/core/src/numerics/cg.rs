//! Krylov solver for Hermitian positive semidefinite normal equations.
//!
//! The recurrence is the conjugate-residual variant of conjugate gradients:
//! one operator application per iteration, and the residual norm is
//! minimised over the Krylov space, so it never increases. The quadratic
//! energy `½xᴴAx − Re bᴴx` decreases monotonically as well, which the
//! reweighted solvers upstream rely on when warm-starting.

use super::tensor::{dot, norm, C64};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: Vec<C64>,
    pub iterations: usize,
    /// `‖b − A x‖ / ‖b‖` of the returned iterate (recurrence value).
    pub rel_residual: f64,
    /// False when `max_iter` was exhausted or the recurrence broke down
    /// before reaching `tol`; `x` is still the last (best) iterate.
    pub converged: bool,
    pub residual_history: Vec<f64>,
}

/// Solves `apply(x) = rhs`, starting from `x0` (zero when absent).
pub fn cg_solve<F>(
    mut apply: F,
    rhs: &[C64],
    x0: Option<&[C64]>,
    opts: CgOptions,
) -> Result<CgOutcome>
where
    F: FnMut(&[C64]) -> Vec<C64>,
{
    if opts.tol <= 0.0 {
        return Err(Error::Usage("cg tolerance must be positive".into()));
    }
    let n = rhs.len();
    let b_norm = norm(rhs);
    let mut x = match x0 {
        Some(x0) if x0.len() == n => x0.to_vec(),
        Some(x0) => {
            return Err(Error::Shape(format!(
                "initial guess has {} entries, rhs has {n}",
                x0.len()
            )))
        }
        None => vec![C64::new(0.0, 0.0); n],
    };
    let scale = if b_norm > 0.0 { b_norm } else { 1.0 };
    let ax = apply(&x);
    let mut r: Vec<C64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut rel = norm(&r) / scale;
    let mut history = vec![rel];
    if rel <= opts.tol || (b_norm == 0.0 && rel == 0.0) {
        return Ok(CgOutcome {
            x,
            iterations: 0,
            rel_residual: rel,
            converged: true,
            residual_history: history,
        });
    }
    let mut ar = apply(&r);
    let mut p = r.clone();
    let mut ap = ar.clone();
    let mut rho = dot(&r, &ar).re;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        let denom = dot(&ap, &ap).re;
        if !denom.is_finite() || !rho.is_finite() {
            return Err(Error::Numerical("non-finite value in Krylov recurrence".into()));
        }
        if denom <= 0.0 || rho <= 0.0 {
            break;
        }
        let alpha = rho / denom;
        for i in 0..n {
            x[i] += p[i] * alpha;
            r[i] -= ap[i] * alpha;
        }
        iterations += 1;
        rel = norm(&r) / scale;
        history.push(rel);
        if !rel.is_finite() {
            return Err(Error::Numerical("non-finite residual".into()));
        }
        if rel <= opts.tol {
            converged = true;
            break;
        }
        ar = apply(&r);
        let rho_next = dot(&r, &ar).re;
        let beta = rho_next / rho;
        rho = rho_next;
        for i in 0..n {
            p[i] = r[i] + p[i] * beta;
            ap[i] = ar[i] + ap[i] * beta;
        }
    }
    Ok(CgOutcome {
        x,
        iterations,
        rel_residual: rel,
        converged,
        residual_history: history,
    })
}
