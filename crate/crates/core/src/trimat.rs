//! Dense lower-triangular matrices and the half-vectorization operators.
//!
//! The elimination matrix that maps `vec(A)` to `vech(A)` is never built;
//! [`vech`], [`unvech`] and [`bar`] index the lower triangle directly.
//!
//! Masking operators, for a square `A`:
//!
//! * `bar(A)`    keeps the lower triangle including the diagonal,
//! * `dg(A)`     keeps the diagonal only,
//! * `barbar(A)` is `bar(A) - dg(A)/2`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

const SOLVE_RTOL: f64 = 1e-10;

fn check_square(a: &Matrix) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    Ok(a.nrows())
}

/// Dense `d x d` matrix whose strict upper triangle is identically zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct LowerTriangular(Matrix);

impl LowerTriangular {
    /// Wraps `m`, rejecting non-square input or any nonzero above the diagonal.
    pub fn new(m: Matrix) -> Result<Self> {
        let d = check_square(&m)?;
        if d == 0 {
            return Err(Error::DimensionMismatch {
                context: "lower-triangular dimension",
                expected: 1,
                found: 0,
            });
        }
        for j in 1..d {
            for i in 0..j {
                if m[(i, j)] != 0.0 {
                    return Err(Error::NotLowerTriangular {
                        row: i,
                        col: j,
                        value: m[(i, j)],
                    });
                }
            }
        }
        Ok(Self(m))
    }

    /// Caller guarantees the upper triangle is zero.
    pub(crate) fn from_masked(m: Matrix) -> Self {
        debug_assert!(m.is_square());
        debug_assert!((0..m.ncols()).all(|j| (0..j).all(|i| m[(i, j)] == 0.0)));
        Self(m)
    }

    pub fn identity(d: usize) -> Self {
        Self(Matrix::identity(d, d))
    }

    pub fn zeros(d: usize) -> Self {
        Self(Matrix::zeros(d, d))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self(Matrix::from_diagonal(&Vector::from_column_slice(diag)))
    }

    /// Row-major construction; entries above the diagonal must be zero.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let d = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::NotSquare {
                rows: d,
                cols: bad.len(),
            });
        }
        Self::new(Matrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn diagonal(&self) -> Vector {
        self.0.diagonal()
    }

    pub fn min_diagonal(&self) -> f64 {
        self.0.diagonal().min()
    }

    /// True when every diagonal entry is strictly positive (and finite).
    pub fn has_positive_diagonal(&self) -> bool {
        self.0.diagonal().iter().all(|&x| x > 0.0 && x.is_finite())
    }

    /// `sum_j log L_jj`; only meaningful for a positive diagonal.
    pub fn log_abs_det(&self) -> f64 {
        self.0.diagonal().iter().map(|x| x.abs().ln()).sum()
    }

    pub fn transpose(&self) -> Matrix {
        self.0.transpose()
    }

    /// `L * L^T`.
    pub fn gram(&self) -> Matrix {
        &self.0 * self.0.transpose()
    }

    pub fn mul_vec(&self, v: &Vector) -> Vector {
        &self.0 * v
    }

    pub fn transpose_mul_vec(&self, v: &Vector) -> Vector {
        self.0.tr_mul(v)
    }

    pub fn solve(&self, b: &Vector, transposed: Transpose) -> Result<Vector> {
        tri_solve(self, b, transposed)
    }

    /// Solves `L X = B` (or `L^T X = B`) column by column.
    pub fn solve_matrix(&self, b: &Matrix, transposed: Transpose) -> Result<Matrix> {
        if b.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "triangular solve right-hand side",
                expected: self.dim(),
                found: b.nrows(),
            });
        }
        self.check_nonsingular()?;
        let mut out = b.clone();
        for mut col in out.column_iter_mut() {
            let mut x = col.clone_owned();
            substitute(&self.0, &mut x, transposed);
            col.copy_from(&x);
        }
        Ok(out)
    }

    pub fn check_nonsingular(&self) -> Result<()> {
        for (index, &value) in self.0.diagonal().iter().enumerate() {
            if value == 0.0 || !value.is_finite() {
                return Err(Error::SingularFactor { index, value });
            }
        }
        Ok(())
    }

    /// `self += step * other`; both operands are lower triangular.
    pub fn axpy(&mut self, step: f64, other: &LowerTriangular) {
        self.0 += &other.0 * step;
    }

    pub fn scale(&self, s: f64) -> LowerTriangular {
        Self(&self.0 * s)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.amax()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for LowerTriangular {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        Self::from_rows(&refs)
    }
}

impl From<LowerTriangular> for Vec<Vec<f64>> {
    fn from(l: LowerTriangular) -> Self {
        l.to_rows()
    }
}

/// Half-vectorization: lower triangle (diagonal included), columns left to right.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfVec {
    dim: usize,
    values: Vec<f64>,
}

impl HalfVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let dim = triangular_root(values.len()).ok_or(Error::NotTriangularNumber(values.len()))?;
        Ok(Self { dim, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Inverse of `d(d+1)/2`, for lengths that are triangular numbers with `d >= 1`.
pub fn triangular_root(len: usize) -> Option<usize> {
    let mut d = ((2.0 * len as f64).sqrt()) as usize;
    while d * (d + 1) / 2 > len {
        d -= 1;
    }
    while (d + 1) * (d + 2) / 2 <= len {
        d += 1;
    }
    (d >= 1 && d * (d + 1) / 2 == len).then_some(d)
}

pub fn vech(a: &Matrix) -> Result<HalfVec> {
    let d = check_square(a)?;
    let mut values = Vec::with_capacity(d * (d + 1) / 2);
    for j in 0..d {
        for i in j..d {
            values.push(a[(i, j)]);
        }
    }
    Ok(HalfVec { dim: d, values })
}

/// `vech` of a lower-triangular matrix, appended to `out`.
pub fn vech_into(l: &LowerTriangular, out: &mut Vec<f64>) {
    let d = l.dim();
    for j in 0..d {
        for i in j..d {
            out.push(l.0[(i, j)]);
        }
    }
}

pub fn unvech(v: &HalfVec) -> LowerTriangular {
    unvech_slice(v.dim, &v.values)
}

/// Rebuilds a `d x d` lower triangle from `d(d+1)/2` column-stacked values.
pub(crate) fn unvech_slice(d: usize, values: &[f64]) -> LowerTriangular {
    debug_assert_eq!(values.len(), d * (d + 1) / 2);
    let mut m = Matrix::zeros(d, d);
    let mut k = 0;
    for j in 0..d {
        for i in j..d {
            m[(i, j)] = values[k];
            k += 1;
        }
    }
    LowerTriangular(m)
}

pub fn bar(a: &Matrix) -> Result<LowerTriangular> {
    check_square(a)?;
    Ok(LowerTriangular(a.lower_triangle()))
}

pub fn dg(a: &Matrix) -> Result<Matrix> {
    check_square(a)?;
    Ok(Matrix::from_diagonal(&a.diagonal()))
}

pub fn barbar(a: &Matrix) -> Result<LowerTriangular> {
    check_square(a)?;
    Ok(barbar_unchecked(a))
}

pub(crate) fn barbar_unchecked(a: &Matrix) -> LowerTriangular {
    let mut l = a.lower_triangle();
    for i in 0..l.nrows() {
        l[(i, i)] *= 0.5;
    }
    LowerTriangular(l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transpose {
    /// Solve `T x = b` by forward substitution.
    No,
    /// Solve `T^T x = b` by back substitution.
    Yes,
}

fn substitute(t: &Matrix, x: &mut Vector, transposed: Transpose) {
    let d = t.nrows();
    match transposed {
        Transpose::No => {
            for i in 0..d {
                let mut s = x[i];
                for k in 0..i {
                    s -= t[(i, k)] * x[k];
                }
                x[i] = s / t[(i, i)];
            }
        }
        Transpose::Yes => {
            for i in (0..d).rev() {
                let mut s = x[i];
                for k in i + 1..d {
                    s -= t[(k, i)] * x[k];
                }
                x[i] = s / t[(i, i)];
            }
        }
    }
}

/// Solves `T x = b` or `T^T x = b` for lower-triangular `T`.
pub fn tri_solve(t: &LowerTriangular, b: &Vector, transposed: Transpose) -> Result<Vector> {
    if b.len() != t.dim() {
        return Err(Error::DimensionMismatch {
            context: "triangular solve right-hand side",
            expected: t.dim(),
            found: b.len(),
        });
    }
    t.check_nonsingular()?;
    let mut x = b.clone();
    substitute(&t.0, &mut x, transposed);
    Ok(x)
}

/// Residual-based acceptance bound used by the tests of [`tri_solve`].
pub fn solve_residual_ok(
    t: &LowerTriangular,
    x: &Vector,
    b: &Vector,
    transposed: Transpose,
) -> bool {
    let r = match transposed {
        Transpose::No => t.mul_vec(x) - b,
        Transpose::Yes => t.transpose_mul_vec(x) - b,
    };
    r.norm() <= SOLVE_RTOL * (t.0.norm() * x.norm() + b.norm())
}

/// Cholesky factorization `S = C C^T` with `C` lower triangular and positive diagonal.
pub fn cholesky(s: &Matrix) -> Result<LowerTriangular> {
    let d = check_square(s)?;
    let scale = s.amax();
    let asym = (s - s.transpose()).amax();
    if asym > 1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NotSymmetric(asym));
    }
    let mut c = Matrix::zeros(d, d);
    for j in 0..d {
        let mut pivot = s[(j, j)];
        for k in 0..j {
            pivot -= c[(j, k)] * c[(j, k)];
        }
        if pivot <= 0.0 || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: pivot,
            });
        }
        let cjj = pivot.sqrt();
        c[(j, j)] = cjj;
        for i in j + 1..d {
            let mut v = s[(i, j)];
            for k in 0..j {
                v -= c[(i, k)] * c[(j, k)];
            }
            c[(i, j)] = v / cjj;
        }
    }
    Ok(LowerTriangular(c))
}

/// Inverse of an SPD matrix through its Cholesky factor.
pub fn spd_inverse(s: &Matrix) -> Result<Matrix> {
    let c = cholesky(s)?;
    let d = c.dim();
    let cinv = c.solve_matrix(&Matrix::identity(d, d), Transpose::No)?;
    Ok(cinv.tr_mul(&cinv))
}
