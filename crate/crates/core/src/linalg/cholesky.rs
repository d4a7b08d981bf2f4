use nalgebra::DMatrix;

use crate::{Error, Result};

/// Relative tolerance for the symmetry check done before factorizing.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Lower-triangular factor `L` with `M = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
}

/// Factorizes a symmetric positive-definite matrix.
///
/// Only the lower triangle is read once symmetry has been checked. A zero,
/// negative or non-finite pivot yields [`Error::NotPositiveDefinite`] carrying
/// the (zero-based) pivot index.
pub fn cholesky(m: &DMatrix<f64>) -> Result<CholeskyFactor> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::dimension(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            m.ncols()
        )));
    }
    check_symmetric(m)?;
    let mut l = m.clone();
    {
        let data = l.as_mut_slice();
        for j in 0..n {
            let (left, right) = data.split_at_mut(j * n);
            let col_j = &mut right[..n];
            for k in 0..j {
                let col_k = &left[k * n..(k + 1) * n];
                let ljk = col_k[j];
                if ljk != 0.0 {
                    for (dst, src) in col_j[j..].iter_mut().zip(&col_k[j..]) {
                        *dst -= ljk * src;
                    }
                }
            }
            let pivot = col_j[j];
            if !(pivot > 0.0) || !pivot.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j });
            }
            let s = pivot.sqrt();
            col_j[j] = s;
            let inv = 1.0 / s;
            for v in &mut col_j[j + 1..] {
                *v *= inv;
            }
            for v in &mut col_j[..j] {
                *v = 0.0;
            }
        }
    }
    Ok(CholeskyFactor { l })
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let n = m.nrows();
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    for j in 0..n {
        for i in (j + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::domain(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Returns `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

impl CholeskyFactor {
    /// Wraps an already lower-triangular factor with a positive diagonal.
    pub fn from_lower(l: DMatrix<f64>) -> Result<Self> {
        if !l.is_square() {
            return Err(Error::dimension("factor must be square"));
        }
        for i in 0..l.nrows() {
            if !(l[(i, i)] > 0.0) {
                return Err(Error::NotPositiveDefinite { pivot: i });
            }
        }
        Ok(Self { l: l.lower_triangle() })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// `log |M|`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    /// Overwrites `b` with `L⁻¹ b`.
    pub fn solve_lower_mut(&self, b: &mut DMatrix<f64>) {
        let n = self.dim();
        assert_eq!(b.nrows(), n, "row mismatch in triangular solve");
        let l = self.l.as_slice();
        for c in 0..b.ncols() {
            let x = b.column_mut(c);
            let x = x.data.into_slice_mut();
            for j in 0..n {
                let col = &l[j * n..(j + 1) * n];
                let xj = x[j] / col[j];
                x[j] = xj;
                if xj != 0.0 {
                    for (xi, lij) in x[j + 1..].iter_mut().zip(&col[j + 1..]) {
                        *xi -= xj * lij;
                    }
                }
            }
        }
    }

    /// Overwrites `b` with `L⁻ᵀ b`.
    pub fn solve_upper_mut(&self, b: &mut DMatrix<f64>) {
        let n = self.dim();
        assert_eq!(b.nrows(), n, "row mismatch in triangular solve");
        let l = self.l.as_slice();
        for c in 0..b.ncols() {
            let x = b.column_mut(c);
            let x = x.data.into_slice_mut();
            for j in (0..n).rev() {
                let col = &l[j * n..(j + 1) * n];
                let dot: f64 = col[j + 1..].iter().zip(&x[j + 1..]).map(|(a, b)| a * b).sum();
                x[j] = (x[j] - dot) / col[j];
            }
        }
    }

    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.solve_lower_mut(&mut x);
        x
    }

    pub fn solve_upper(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.solve_upper_mut(&mut x);
        x
    }

    /// `M⁻¹ b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.solve_lower_mut(&mut x);
        self.solve_upper_mut(&mut x);
        x
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        symmetrize(&self.solve(&DMatrix::identity(self.dim(), self.dim())))
    }

    /// `tr(bᵀ M⁻¹ b) = ‖L⁻¹ b‖²_F`.
    pub fn quad_form(&self, b: &DMatrix<f64>) -> f64 {
        self.solve_lower(b).norm_squared()
    }
}
