//! Dense complex linear algebra for the calibration toolkit.
//!
//! Matrices are stored in column-major order so that serialized artifacts are
//! bit-reproducible across runs and `vec` is a plain copy of the storage.
//! The kit is deliberately small: products, structured products (Kronecker,
//! Khatri-Rao, Hadamard), vectorization, a pivoted-QR least-squares solver and
//! a one-sided Jacobi SVD cover everything the estimators need.

mod lstsq;
mod svd;

pub use lstsq::{cholesky_solve_spd, lstsq, lstsq_mat, solve_inverse};
pub use svd::{singular_values, svd, Svd};

use num_complex::Complex64;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Numerical rank threshold: a diagonal/singular value below `RANK_TOL` times
/// the largest one counts as zero.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MathError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("rank deficient system: numerical rank {rank} < {cols} columns")]
    RankDeficient { rank: usize, cols: usize },
}

pub type MathResult<T> = Result<T, MathError>;

/// Dense complex vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CVector {
    entries: Vec<Complex64>,
}

/// Dense complex matrix, column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<Complex64>,
}

impl CVector {
    pub fn zeros(len: usize) -> Self {
        CVector {
            entries: vec![Complex64::new(0.0, 0.0); len],
        }
    }

    pub fn from_entries(entries: Vec<Complex64>) -> Self {
        CVector { entries }
    }

    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> Complex64) -> Self {
        CVector {
            entries: (0..len).map(&mut f).collect(),
        }
    }

    pub fn ones(len: usize) -> Self {
        CVector {
            entries: vec![Complex64::new(1.0, 0.0); len],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.entries
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.entries
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Hermitian inner product `self^H other`.
    pub fn dot_h(&self, other: &CVector) -> Complex64 {
        assert_eq!(self.len(), other.len(), "dot_h length mismatch");
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn scale(&self, s: Complex64) -> CVector {
        CVector {
            entries: self.entries.iter().map(|z| z * s).collect(),
        }
    }

    pub fn add(&self, other: &CVector) -> CVector {
        assert_eq!(self.len(), other.len(), "add length mismatch");
        CVector {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &CVector) -> CVector {
        assert_eq!(self.len(), other.len(), "sub length mismatch");
        CVector {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn conj(&self) -> CVector {
        CVector {
            entries: self.entries.iter().map(|z| z.conj()).collect(),
        }
    }

    /// Kronecker product of two vectors.
    pub fn kron(&self, other: &CVector) -> CVector {
        let mut out = Vec::with_capacity(self.len() * other.len());
        for a in &self.entries {
            for b in &other.entries {
                out.push(a * b);
            }
        }
        CVector { entries: out }
    }

    /// Stack several vectors end to end.
    pub fn concat(parts: &[&CVector]) -> CVector {
        let mut out = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            out.extend_from_slice(&p.entries);
        }
        CVector { entries: out }
    }

    /// Interpret the vector as a column-major `rows x cols` matrix.
    pub fn into_matrix(self, rows: usize, cols: usize) -> CMatrix {
        assert_eq!(self.len(), rows * cols, "into_matrix size mismatch");
        CMatrix {
            rows,
            cols,
            entries: self.entries,
        }
    }
}

impl std::ops::Index<usize> for CVector {
    type Output = Complex64;
    fn index(&self, i: usize) -> &Complex64 {
        &self.entries[i]
    }
}

impl std::ops::IndexMut<usize> for CVector {
    fn index_mut(&mut self, i: usize) -> &mut Complex64 {
        &mut self.entries[i]
    }
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix {
            rows,
            cols,
            entries: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        CMatrix {
            rows,
            cols,
            entries: vec![Complex64::new(1.0, 0.0); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                entries.push(f(i, j));
            }
        }
        CMatrix {
            rows,
            cols,
            entries,
        }
    }

    /// Build from column-major storage.
    pub fn from_col_major(rows: usize, cols: usize, entries: Vec<Complex64>) -> Self {
        assert_eq!(entries.len(), rows * cols, "storage size mismatch");
        CMatrix {
            rows,
            cols,
            entries,
        }
    }

    pub fn from_cols(cols: &[CVector]) -> Self {
        assert!(!cols.is_empty(), "from_cols needs at least one column");
        let rows = cols[0].len();
        let mut entries = Vec::with_capacity(rows * cols.len());
        for c in cols {
            assert_eq!(c.len(), rows, "from_cols ragged input");
            entries.extend_from_slice(c.as_slice());
        }
        CMatrix {
            rows,
            cols: cols.len(),
            entries,
        }
    }

    /// Diagonal matrix from a vector.
    pub fn from_diag(d: &CVector) -> Self {
        let mut m = CMatrix::zeros(d.len(), d.len());
        for i in 0..d.len() {
            m[(i, i)] = d[i];
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn col(&self, j: usize) -> CVector {
        assert!(j < self.cols);
        CVector {
            entries: self.entries[j * self.rows..(j + 1) * self.rows].to_vec(),
        }
    }

    pub fn row(&self, i: usize) -> CVector {
        assert!(i < self.rows);
        CVector {
            entries: (0..self.cols).map(|j| self[(i, j)]).collect(),
        }
    }

    pub fn set_col(&mut self, j: usize, v: &CVector) {
        assert!(j < self.cols && v.len() == self.rows);
        self.entries[j * self.rows..(j + 1) * self.rows].copy_from_slice(v.as_slice());
    }

    pub fn transpose(&self) -> CMatrix {
        CMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Conjugate transpose.
    pub fn hermitian(&self) -> CMatrix {
        CMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn conj(&self) -> CMatrix {
        self.map(|z| z.conj())
    }

    /// Entrywise real part (imaginary parts zeroed).
    pub fn real_part(&self) -> CMatrix {
        self.map(|z| Complex64::new(z.re, 0.0))
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> CMatrix {
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|&z| f(z)).collect(),
        }
    }

    pub fn scale(&self, s: Complex64) -> CMatrix {
        self.map(|z| z * s)
    }

    pub fn add(&self, other: &CMatrix) -> CMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &CMatrix) -> CMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn mul(&self, other: &CMatrix) -> CMatrix {
        assert_eq!(
            self.cols, other.rows,
            "mul dimension mismatch {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = CMatrix::zeros(self.rows, other.cols);
        // Column-major friendly loop order.
        for j in 0..other.cols {
            for k in 0..self.cols {
                let b = other[(k, j)];
                if b == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let a_col = &self.entries[k * self.rows..(k + 1) * self.rows];
                let o_col = &mut out.entries[j * self.rows..(j + 1) * self.rows];
                for i in 0..self.rows {
                    o_col[i] += a_col[i] * b;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &CVector) -> CVector {
        assert_eq!(self.cols, v.len(), "mul_vec dimension mismatch");
        let mut out = CVector::zeros(self.rows);
        for k in 0..self.cols {
            let b = v[k];
            let a_col = &self.entries[k * self.rows..(k + 1) * self.rows];
            for i in 0..self.rows {
                out[i] += a_col[i] * b;
            }
        }
        out
    }

    /// Left-multiply by `diag(d)`: scales row `i` by `d[i]`.
    pub fn scale_rows(&self, d: &CVector) -> CMatrix {
        assert_eq!(self.rows, d.len(), "scale_rows length mismatch");
        CMatrix::from_fn(self.rows, self.cols, |i, j| d[i] * self[(i, j)])
    }

    /// Right-multiply by `diag(d)`: scales column `j` by `d[j]`.
    pub fn scale_cols(&self, d: &CVector) -> CMatrix {
        assert_eq!(self.cols, d.len(), "scale_cols length mismatch");
        CMatrix::from_fn(self.rows, self.cols, |i, j| self[(i, j)] * d[j])
    }

    /// Stack blocks horizontally.
    pub fn hstack(blocks: &[&CMatrix]) -> CMatrix {
        assert!(!blocks.is_empty());
        let rows = blocks[0].rows;
        let mut entries = Vec::with_capacity(blocks.iter().map(|b| b.entries.len()).sum());
        for b in blocks {
            assert_eq!(b.rows, rows, "hstack ragged blocks");
            entries.extend_from_slice(&b.entries);
        }
        let cols = entries.len() / rows.max(1);
        CMatrix {
            rows,
            cols,
            entries,
        }
    }

    /// Stack blocks vertically.
    pub fn vstack(blocks: &[&CMatrix]) -> CMatrix {
        assert!(!blocks.is_empty());
        let cols = blocks[0].cols;
        let rows: usize = blocks.iter().map(|b| b.rows).sum();
        let mut out = CMatrix::zeros(rows, cols);
        let mut off = 0;
        for b in blocks {
            assert_eq!(b.cols, cols, "vstack ragged blocks");
            for j in 0..cols {
                for i in 0..b.rows {
                    out[(off + i, j)] = b[(i, j)];
                }
            }
            off += b.rows;
        }
        out
    }

    pub fn fro_norm_sq(&self) -> f64 {
        self.entries.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn fro_norm(&self) -> f64 {
        self.fro_norm_sq().sqrt()
    }

    /// Reshape preserving column-major order.
    pub fn reshape(&self, rows: usize, cols: usize) -> CMatrix {
        assert_eq!(rows * cols, self.rows * self.cols, "reshape size mismatch");
        CMatrix {
            rows,
            cols,
            entries: self.entries.clone(),
        }
    }

    /// Rectangular sub-block, rows `r0..r0+nr`, cols `c0..c0+nc`.
    pub fn block(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> CMatrix {
        assert!(r0 + nr <= self.rows && c0 + nc <= self.cols, "block out of range");
        CMatrix::from_fn(nr, nc, |i, j| self[(r0 + i, c0 + j)])
    }
}

impl std::ops::Index<(usize, usize)> for CMatrix {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.entries[j * self.rows + i]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.entries[j * self.rows + i]
    }
}

/// Kronecker product, dims `(a.rows*b.rows, a.cols*b.cols)`.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let mut out = CMatrix::zeros(a.rows * b.rows, a.cols * b.cols);
    for ja in 0..a.cols {
        for ia in 0..a.rows {
            let s = a[(ia, ja)];
            for jb in 0..b.cols {
                for ib in 0..b.rows {
                    out[(ia * b.rows + ib, ja * b.cols + jb)] = s * b[(ib, jb)];
                }
            }
        }
    }
    out
}

/// Khatri-Rao (column-wise Kronecker) product: column `j` of the result is
/// `kron(a.col(j), b.col(j))`.
pub fn khatri_rao(a: &CMatrix, b: &CMatrix) -> MathResult<CMatrix> {
    if a.cols != b.cols {
        return Err(MathError::Dim(format!(
            "khatri_rao column counts differ: {} vs {}",
            a.cols, b.cols
        )));
    }
    let mut out = CMatrix::zeros(a.rows * b.rows, a.cols);
    for j in 0..a.cols {
        for ia in 0..a.rows {
            let s = a[(ia, j)];
            for ib in 0..b.rows {
                out[(ia * b.rows + ib, j)] = s * b[(ib, j)];
            }
        }
    }
    Ok(out)
}

/// Entrywise (Hadamard) product.
pub fn hadamard(a: &CMatrix, b: &CMatrix) -> MathResult<CMatrix> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(MathError::Dim(format!(
            "hadamard shapes differ: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(CMatrix {
        rows: a.rows,
        cols: a.cols,
        entries: a
            .entries
            .iter()
            .zip(&b.entries)
            .map(|(x, y)| x * y)
            .collect(),
    })
}

/// Column vectorization. Satisfies `vec(A X B) == kron(B^T, A) * vec(X)`.
pub fn vec_of(a: &CMatrix) -> CVector {
    CVector {
        entries: a.entries.clone(),
    }
}

// --- serde: complex entries as [re, im] pairs ------------------------------

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    entries: Vec<[f64; 2]>,
}

impl Serialize for CMatrix {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        MatrixRepr {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|z| [z.re, z.im]).collect(),
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for CMatrix {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let r = MatrixRepr::deserialize(de)?;
        if r.entries.len() != r.rows * r.cols {
            return Err(D::Error::custom(format!(
                "matrix storage length {} does not match {}x{}",
                r.entries.len(),
                r.rows,
                r.cols
            )));
        }
        Ok(CMatrix {
            rows: r.rows,
            cols: r.cols,
            entries: r
                .entries
                .into_iter()
                .map(|[re, im]| Complex64::new(re, im))
                .collect(),
        })
    }
}

impl Serialize for CVector {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        self.entries
            .iter()
            .map(|z| [z.re, z.im])
            .collect::<Vec<_>>()
            .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for CVector {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let pairs = Vec::<[f64; 2]>::deserialize(de)?;
        Ok(CVector {
            entries: pairs
                .into_iter()
                .map(|[re, im]| Complex64::new(re, im))
                .collect(),
        })
    }
}
