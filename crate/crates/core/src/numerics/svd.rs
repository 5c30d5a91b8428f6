//! Truncated SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns are orthogonalised directly rather than through an explicit Gram
//! matrix, so small singular values keep full relative accuracy. The
//! matrices handled here have at most a few hundred columns.

use super::tensor::{dot, norm_sqr, CMatrix, C64};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Svd {
    /// `m × R`, orthonormal columns.
    pub u: CMatrix,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// `R × n`, orthonormal rows.
    pub vt: CMatrix,
}

impl Svd {
    /// `U · diag(s) · Vᴴ`.
    pub fn reconstruct(&self) -> CMatrix {
        let (m, r, n) = (self.u.rows(), self.s.len(), self.vt.cols());
        let mut out = CMatrix::zeros(m, n);
        for i in 0..m {
            for k in 0..r {
                let a = self.u.get(i, k) * self.s[k];
                let dst = &mut out.data_mut()[i * n..(i + 1) * n];
                for (d, &b) in dst.iter_mut().zip(self.vt.row(k)) {
                    *d += a * b;
                }
            }
        }
        out
    }
}

const MAX_SWEEPS: usize = 80;

pub fn svd_truncated(m: &CMatrix, rank: usize) -> Result<Svd> {
    let max = m.rows().min(m.cols());
    if rank == 0 || rank > max {
        return Err(Error::Rank { rank, max });
    }
    if m.rows() >= m.cols() {
        let (u, s, v) = jacobi_tall(m)?;
        Ok(truncate(u, s, v, rank, m.rows(), m.cols()))
    } else {
        // M = (Mᴴ)ᴴ = (U' Σ V'ᴴ)ᴴ = V' Σ U'ᴴ
        let (u, s, v) = jacobi_tall(&m.adjoint())?;
        Ok(truncate(v, s, u, rank, m.rows(), m.cols()))
    }
}

/// All `min(m, n)` singular triplets.
pub fn svd_full(m: &CMatrix) -> Result<Svd> {
    svd_truncated(m, m.rows().min(m.cols()))
}

/// Returns left vectors (columns, length m), singular values and right
/// vectors (columns, length n), sorted by decreasing singular value.
#[allow(clippy::type_complexity)]
fn jacobi_tall(m: &CMatrix) -> Result<(Vec<Vec<C64>>, Vec<f64>, Vec<Vec<C64>>)> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut a: Vec<Vec<C64>> = (0..cols).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<C64>> = (0..cols)
        .map(|j| {
            let mut e = vec![C64::new(0.0, 0.0); cols];
            e[j] = C64::new(1.0, 0.0);
            e
        })
        .collect();
    if a.iter().flatten().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numerical("non-finite entry in SVD input".into()));
    }
    let tol = 4.0 * f64::EPSILON;
    let mut norms: Vec<f64> = a.iter().map(|c| norm_sqr(c)).collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&a[p], &a[q]);
                let g = gamma.norm();
                if g <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let phase = gamma.conj() / g;
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, phase, c, s);
                rotate(&mut v, p, q, phase, c, s);
                norms[p] = norm_sqr(&a[p]);
                norms[q] = norm_sqr(&a[q]);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let s: Vec<f64> = order.iter().map(|&j| norms[j].sqrt()).collect();
    let mut u: Vec<Vec<C64>> = Vec::with_capacity(cols);
    let smax = s.first().copied().unwrap_or(0.0);
    for (&j, &sj) in order.iter().zip(&s) {
        if sj > smax * 1e-300 && sj > 0.0 {
            u.push(a[j].iter().map(|z| z / sj).collect());
        } else {
            u.push(complete_basis(&u, rows));
        }
    }
    let v = order.iter().map(|&j| v[j].clone()).collect();
    Ok((u, s, v))
}

fn rotate(cols: &mut [Vec<C64>], p: usize, q: usize, phase: C64, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (ap, aq) = (&mut left[p], &mut right[0]);
    for (x, y) in ap.iter_mut().zip(aq.iter_mut()) {
        let yq = *y * phase;
        let xp = *x;
        *x = xp * c - yq * s;
        *y = xp * s + yq * c;
    }
}

/// A unit vector orthogonal to every column in `basis`.
fn complete_basis(basis: &[Vec<C64>], len: usize) -> Vec<C64> {
    for k in 0..len {
        let mut e = vec![C64::new(0.0, 0.0); len];
        e[k] = C64::new(1.0, 0.0);
        for _ in 0..2 {
            for b in basis {
                let proj = dot(b, &e);
                for (x, y) in e.iter_mut().zip(b) {
                    *x -= proj * y;
                }
            }
        }
        let n = norm_sqr(&e).sqrt();
        if n > 1e-6 {
            return e.into_iter().map(|z| z / n).collect();
        }
    }
    vec![C64::new(0.0, 0.0); len]
}

fn truncate(
    u: Vec<Vec<C64>>,
    s: Vec<f64>,
    v: Vec<Vec<C64>>,
    rank: usize,
    rows: usize,
    cols: usize,
) -> Svd {
    let u_mat = CMatrix::from_fn(rows, rank, |i, k| u[k][i]);
    let vt = CMatrix::from_fn(rank, cols, |k, j| v[k][j].conj());
    Svd {
        u: u_mat,
        s: s[..rank].to_vec(),
        vt,
    }
}
