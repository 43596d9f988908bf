//! Thin singular value decomposition by one-sided Jacobi rotations.
//!
//! One-sided Jacobi computes tiny singular values to high relative accuracy,
//! which the decoupling checks rely on (numerical-rank-1 tests compare
//! sigma_2/sigma_1 against 1e-10). Left singular vectors attached to zero
//! singular values are filled by deterministic orthonormal completion so the
//! beamforming recipes always get a full frame.

use super::{CMatrix, CVector};
use num_complex::Complex64;

#[derive(Debug, Clone)]
pub struct Svd {
    /// Left singular vectors, `m x min(m,n)`, orthonormal columns.
    pub u: CMatrix,
    /// Singular values, non-increasing.
    pub s: Vec<f64>,
    /// Right singular vectors, `n x min(m,n)`, orthonormal columns.
    pub v: CMatrix,
}

const MAX_SWEEPS: usize = 60;
const ORTH_TOL: f64 = 1e-14;

/// Thin SVD `a = u diag(s) v^H`.
pub fn svd(a: &CMatrix) -> Svd {
    if a.rows() < a.cols() {
        // A^H = V S U^H.
        let t = svd(&a.hermitian());
        return Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        };
    }
    let (m, n) = (a.rows(), a.cols());
    let mut g = a.clone();
    let mut v = CMatrix::identity(n);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = Complex64::new(0.0, 0.0);
                for i in 0..m {
                    let gp = g[(i, p)];
                    let gq = g[(i, q)];
                    app += gp.norm_sqr();
                    aqq += gq.norm_sqr();
                    apq += gp.conj() * gq;
                }
                let r = apq.norm();
                if r <= ORTH_TOL * (app * aqq).sqrt() || r == 0.0 {
                    continue;
                }
                rotated = true;
                // Phase-align column q, then apply the real Jacobi rotation
                // that diagonalizes [[app, r], [r, aqq]].
                let phase = apq / r;
                let tau = (aqq - app) / (2.0 * r);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let phc = phase.conj();
                for i in 0..m {
                    let gp = g[(i, p)];
                    let gq = g[(i, q)] * phc;
                    g[(i, p)] = gp * c - gq * s;
                    g[(i, q)] = gp * s + gq * c;
                }
                for i in 0..n {
                    let vp = v[(i, p)];
                    let vq = v[(i, q)] * phc;
                    v[(i, p)] = vp * c - vq * s;
                    v[(i, q)] = vp * s + vq * c;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // Column norms are the singular values; sort them non-increasing.
    let mut idx: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| g.col(j).norm()).collect();
    idx.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap());

    let mut s = Vec::with_capacity(n);
    let mut u = CMatrix::zeros(m, n);
    let mut v_sorted = CMatrix::zeros(n, n);
    for (out_j, &j) in idx.iter().enumerate() {
        s.push(norms[j]);
        v_sorted.set_col(out_j, &v.col(j));
        if norms[j] > 0.0 {
            u.set_col(out_j, &g.col(j).scale(Complex64::new(1.0 / norms[j], 0.0)));
        }
    }
    complete_zero_columns(&mut u, &s);

    Svd { u, s, v: v_sorted }
}

/// Singular values only.
pub fn singular_values(a: &CMatrix) -> Vec<f64> {
    svd(a).s
}

/// Replace columns whose singular value vanished (relative to the largest)
/// with a deterministic orthonormal completion built from canonical basis
/// vectors.
fn complete_zero_columns(u: &mut CMatrix, s: &[f64]) {
    let m = u.rows();
    let smax = s.first().copied().unwrap_or(0.0);
    let cutoff = smax * 1e-300;
    let mut next_basis = 0usize;
    for j in 0..u.cols() {
        if s[j] > cutoff && s[j] > 0.0 {
            continue;
        }
        // Gram-Schmidt a canonical vector against the columns built so far.
        'basis: while next_basis < m {
            let mut cand = CVector::zeros(m);
            cand[next_basis] = Complex64::new(1.0, 0.0);
            next_basis += 1;
            for _ in 0..2 {
                for k in 0..u.cols() {
                    if k == j {
                        continue;
                    }
                    let col = u.col(k);
                    if col.norm_sq() == 0.0 {
                        continue;
                    }
                    let proj = col.dot_h(&cand);
                    cand = cand.sub(&col.scale(proj));
                }
            }
            let nrm = cand.norm();
            if nrm > 1e-8 {
                u.set_col(j, &cand.scale(Complex64::new(1.0 / nrm, 0.0)));
                break 'basis;
            }
        }
    }
}
