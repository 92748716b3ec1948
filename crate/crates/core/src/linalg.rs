//! Small dense linear-algebra helpers shared by the model, control and fusion code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute entry of `m - mᵀ`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && asymmetry(m) <= tol
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!("{what} is {}x{}", m.nrows(), m.ncols())));
    }
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

/// Inverse of a symmetric positive-definite matrix, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&cholesky(m, what)?.inverse()))
}

pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn is_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Matrix exponential by scaling and squaring of a truncated Taylor series.
/// Intended for the small state matrices used in discretization.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.norm();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = m / 2f64.powi(squarings as i32);
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=20 {
        term = &term * &scaled / k as f64;
        result += &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Lower Cholesky factor stored row by row in packed form.
///
/// Row `i` occupies `data[i(i+1)/2 .. i(i+1)/2 + i + 1]`, so both forward
/// substitution (row sweeps) and back substitution (column updates driven by
/// rows) read contiguous memory. Prediction solves are bandwidth bound on
/// this factor, and multi-column right-hand sides share each row read.
#[derive(Clone, Debug)]
pub struct PackedCholesky {
    n: usize,
    data: Vec<f64>,
}

impl PackedCholesky {
    pub fn factor(m: DMatrix<f64>, what: &str) -> Result<Self> {
        let n = m.nrows();
        let chol = Cholesky::new(m).ok_or_else(|| Error::Factorization(what.to_string()))?;
        let l = chol.l_dirty();
        let mut data = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in 0..=i {
                data.push(l[(i, j)]);
            }
        }
        Ok(Self { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        let start = i * (i + 1) / 2;
        &self.data[start..start + i + 1]
    }

    /// Solves `L Y = B` column by column, returning `Y`.
    pub fn forward_solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(b.nrows(), self.n, "right-hand side has wrong row count");
        let m = b.ncols();
        // Column-major storage keeps each column contiguous for the dot products.
        let mut y = b.clone();
        let ys = y.as_mut_slice();
        for i in 0..self.n {
            let row = self.row(i);
            let (off, diag) = (&row[..i], row[i]);
            for c in 0..m {
                let col = &ys[c * self.n..c * self.n + i];
                let s: f64 = off.iter().zip(col).map(|(a, b)| a * b).sum();
                let idx = c * self.n + i;
                ys[idx] = (ys[idx] - s) / diag;
            }
        }
        y
    }

    /// Solves `Lᵀ X = Y` in place.
    fn backward_solve_in_place(&self, y: &mut DVector<f64>) {
        let ys = y.as_mut_slice();
        for j in (0..self.n).rev() {
            let row = self.row(j);
            ys[j] /= row[j];
            let xj = ys[j];
            for (yi, lji) in ys[..j].iter_mut().zip(&row[..j]) {
                *yi -= lji * xj;
            }
        }
    }

    /// Solves `(L Lᵀ) x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let bm = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        let mut y = DVector::from_column_slice(self.forward_solve(&bm).as_slice());
        self.backward_solve_in_place(&mut y);
        y
    }
}
