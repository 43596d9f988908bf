//! Least squares via Householder QR with column pivoting.
//!
//! The normal-equation closed forms in the estimator derivations are treated
//! as the mathematical contract only; solving through an orthogonal
//! factorization gives the identical answer for full-rank systems with far
//! better conditioning. Rank is judged on the pivoted R diagonal against
//! [`super::RANK_TOL`] and deficiency is reported, never silently repaired.

use super::{CMatrix, CVector, MathError, MathResult, RANK_TOL};
use num_complex::Complex64;

struct PivotedQr {
    /// Transformed matrix; upper triangle holds R.
    r: CMatrix,
    /// Column permutation: solution index `perm[j]` receives triangular component `j`.
    perm: Vec<usize>,
    rank: usize,
}

/// Factorize `a` in place while applying the same Householder reflections to
/// every column of `rhs`.
fn factorize(a: &CMatrix, rhs: &mut CMatrix) -> PivotedQr {
    let (m, n) = (a.rows(), a.cols());
    let mut r = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let nrhs = rhs.cols();

    for k in 0..n.min(m) {
        // Pivot: trailing column with the largest remaining norm. Norms are
        // recomputed exactly; the solver targets small/medium systems.
        let mut best = k;
        let mut best_norm = f64::NEG_INFINITY;
        for j in k..n {
            let mut s = 0.0;
            for i in k..m {
                s += r[(i, j)].norm_sqr();
            }
            if s > best_norm {
                best_norm = s;
                best = j;
            }
        }
        if best != k {
            for i in 0..m {
                let tmp = r[(i, k)];
                r[(i, k)] = r[(i, best)];
                r[(i, best)] = tmp;
            }
            perm.swap(k, best);
        }

        let norm_x = best_norm.max(0.0).sqrt();
        if norm_x == 0.0 {
            continue;
        }

        // Householder vector v = x - alpha e1 with alpha = -exp(i arg x0) |x|,
        // chosen so v0 = x0 - alpha has no cancellation.
        let x0 = r[(k, k)];
        let alpha = if x0.norm() == 0.0 {
            Complex64::new(-norm_x, 0.0)
        } else {
            -(x0 / x0.norm()) * norm_x
        };
        let mut v = vec![Complex64::new(0.0, 0.0); m - k];
        v[0] = x0 - alpha;
        for i in k + 1..m {
            v[i - k] = r[(i, k)];
        }
        let vnorm_sq: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        if vnorm_sq == 0.0 {
            continue;
        }
        let beta = 2.0 / vnorm_sq;

        // Column k becomes alpha e1 by construction.
        r[(k, k)] = alpha;
        for i in k + 1..m {
            r[(i, k)] = Complex64::new(0.0, 0.0);
        }
        // Reflect the trailing columns and the right-hand sides.
        for j in k + 1..n {
            let mut w = Complex64::new(0.0, 0.0);
            for i in k..m {
                w += v[i - k].conj() * r[(i, j)];
            }
            w *= beta;
            for i in k..m {
                let d = w * v[i - k];
                r[(i, j)] -= d;
            }
        }
        for j in 0..nrhs {
            let mut w = Complex64::new(0.0, 0.0);
            for i in k..m {
                w += v[i - k].conj() * rhs[(i, j)];
            }
            w *= beta;
            for i in k..m {
                let d = w * v[i - k];
                rhs[(i, j)] -= d;
            }
        }
    }

    let mut diag_max = 0.0_f64;
    for k in 0..n.min(m) {
        diag_max = diag_max.max(r[(k, k)].norm());
    }
    let rank = if diag_max == 0.0 {
        0
    } else {
        (0..n.min(m))
            .take_while(|&k| r[(k, k)].norm() >= RANK_TOL * diag_max)
            .count()
    };

    PivotedQr { r, perm, rank }
}

/// Minimum-residual solution of `a x = b` for `a` with at least as many rows
/// as columns. Rank-deficient systems are rejected with the numerical rank.
pub fn lstsq(a: &CMatrix, b: &CVector) -> MathResult<CVector> {
    let sol = lstsq_mat(a, &CMatrix::from_cols(std::slice::from_ref(b)))?;
    Ok(sol.col(0))
}

/// Multi-right-hand-side variant of [`lstsq`].
pub fn lstsq_mat(a: &CMatrix, b: &CMatrix) -> MathResult<CMatrix> {
    let (m, n) = (a.rows(), a.cols());
    if m < n {
        return Err(MathError::Dim(format!(
            "least squares needs rows >= cols, got {}x{}",
            m, n
        )));
    }
    if b.rows() != m {
        return Err(MathError::Dim(format!(
            "rhs has {} rows, expected {}",
            b.rows(),
            m
        )));
    }
    if n == 0 {
        return Ok(CMatrix::zeros(0, b.cols()));
    }
    let mut qtb = b.clone();
    let f = factorize(a, &mut qtb);
    if f.rank < n {
        return Err(MathError::RankDeficient { rank: f.rank, cols: n });
    }
    // Back substitution per right-hand side, then undo the pivoting.
    let mut out = CMatrix::zeros(n, b.cols());
    for j in 0..b.cols() {
        let mut y = vec![Complex64::new(0.0, 0.0); n];
        for k in (0..n).rev() {
            let mut s = qtb[(k, j)];
            for l in k + 1..n {
                s -= f.r[(k, l)] * y[l];
            }
            y[k] = s / f.r[(k, k)];
        }
        for k in 0..n {
            out[(f.perm[k], j)] = y[k];
        }
    }
    Ok(out)
}

/// Inverse of a square full-rank matrix through the QR solver.
pub fn solve_inverse(a: &CMatrix) -> MathResult<CMatrix> {
    if a.rows() != a.cols() {
        return Err(MathError::Dim(format!(
            "inverse needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    lstsq_mat(a, &CMatrix::identity(a.rows()))
}

/// Solve a Hermitian positive-definite system by Cholesky factorization.
///
/// No numerical-rank gate is applied; this is the escape hatch for
/// explicitly damped (hence PD) normal systems. Returns `None` when a pivot
/// is not strictly positive, i.e. the matrix is not PD after rounding.
pub fn cholesky_solve_spd(a: &CMatrix, b: &CVector) -> Option<CVector> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return None;
    }
    // Lower factor L with a = L L^H.
    let mut l = CMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)].re;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        // Also bails on NaN pivots.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(d > 0.0) {
            return None;
        }
        let piv = d.sqrt();
        l[(j, j)] = Complex64::new(piv, 0.0);
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = s / piv;
        }
    }
    // Forward then backward substitution.
    let mut y = vec![Complex64::new(0.0, 0.0); n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    let mut x = CVector::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)].conj() * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    Some(x)
}
