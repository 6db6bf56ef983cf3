//! Small dense linear algebra for 2×2 and 3×3 symmetric matrices.
//!
//! Covariances are stored as packed lower triangles in row-major order:
//! `(0,0), (1,0), (1,1), (2,0), (2,1), (2,2)`. Everything here is generic over
//! [`Real`] so the same code runs on plain `f64` and on taped scalars when a
//! local gradient is needed.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar type accepted by the generic mixture arithmetic.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn val(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// Number of packed entries of a symmetric `k×k` matrix.
#[inline]
pub const fn packed_len(k: usize) -> usize {
    k * (k + 1) / 2
}

/// Index of entry `(i, j)` in packed lower-triangular storage.
#[inline]
pub const fn pidx(i: usize, j: usize) -> usize {
    if i >= j {
        i * (i + 1) / 2 + j
    } else {
        j * (j + 1) / 2 + i
    }
}

pub type Packed<T> = [T; 6];
pub type Vector<T> = [T; 3];

pub fn identity<T: Real>(k: usize) -> Packed<T> {
    let mut m = [T::zero(); 6];
    for i in 0..k {
        m[pidx(i, i)] = T::cst(1.0);
    }
    m
}

pub fn trace<T: Real>(m: &Packed<T>, k: usize) -> T {
    let mut t = T::zero();
    for i in 0..k {
        t = t + m[pidx(i, i)];
    }
    t
}

/// Cholesky factor `L` (packed lower) with `L Lᵀ = a`, or `None` when `a` is
/// not positive-definite.
pub fn cholesky<T: Real>(a: &Packed<T>, k: usize) -> Option<Packed<T>> {
    let mut l = [T::zero(); 6];
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[pidx(i, j)];
            for p in 0..j {
                s = s - l[pidx(i, p)] * l[pidx(j, p)];
            }
            if i == j {
                let v = s.val();
                if !(v > 0.0) || !v.is_finite() {
                    return None;
                }
                l[pidx(i, i)] = s.sqrt();
            } else {
                l[pidx(i, j)] = s / l[pidx(j, j)];
            }
        }
    }
    Some(l)
}

/// Solves `L y = b` for lower-triangular packed `L`.
pub fn solve_lower<T: Real>(l: &Packed<T>, b: &Vector<T>, k: usize) -> Vector<T> {
    let mut y = [T::zero(); 3];
    for i in 0..k {
        let mut s = b[i];
        for p in 0..i {
            s = s - l[pidx(i, p)] * y[p];
        }
        y[i] = s / l[pidx(i, i)];
    }
    y
}

/// Solves `Lᵀ x = y` for lower-triangular packed `L`.
pub fn solve_upper_t<T: Real>(l: &Packed<T>, y: &Vector<T>, k: usize) -> Vector<T> {
    let mut x = [T::zero(); 3];
    for i in (0..k).rev() {
        let mut s = y[i];
        for p in i + 1..k {
            s = s - l[pidx(p, i)] * x[p];
        }
        x[i] = s / l[pidx(i, i)];
    }
    x
}

/// Solves `(L Lᵀ) x = b`.
pub fn chol_solve<T: Real>(l: &Packed<T>, b: &Vector<T>, k: usize) -> Vector<T> {
    let y = solve_lower(l, b, k);
    solve_upper_t(l, &y, k)
}

/// `ln det(L Lᵀ)`.
pub fn chol_log_det<T: Real>(l: &Packed<T>, k: usize) -> T {
    let mut s = T::zero();
    for i in 0..k {
        s = s + l[pidx(i, i)].ln();
    }
    s + s
}

/// Smallest diagonal entry of a Cholesky factor.
pub fn chol_min_pivot<T: Real>(l: &Packed<T>, k: usize) -> f64 {
    (0..k)
        .map(|i| l[pidx(i, i)].val())
        .fold(f64::INFINITY, f64::min)
}

/// `tr((L Lᵀ)⁻¹ B)` for symmetric packed `B`, computed column by column with
/// triangular solves.
pub fn chol_trace_solve<T: Real>(l: &Packed<T>, b: &Packed<T>, k: usize) -> T {
    let mut t = T::zero();
    for j in 0..k {
        let mut col = [T::zero(); 3];
        for i in 0..k {
            col[i] = b[pidx(i, j)];
        }
        let x = chol_solve(l, &col, k);
        t = t + x[j];
    }
    t
}

/// Packed `(L Lᵀ)⁻¹`, assembled from triangular solves against unit vectors.
/// Only used where the full precision matrix is itself the quantity of
/// interest (covariance gradients).
pub fn chol_inverse<T: Real>(l: &Packed<T>, k: usize) -> Packed<T> {
    let mut inv = [T::zero(); 6];
    for j in 0..k {
        let mut e = [T::zero(); 3];
        e[j] = T::cst(1.0);
        let x = chol_solve(l, &e, k);
        for i in j..k {
            inv[pidx(i, j)] = x[i];
        }
    }
    inv
}

/// Inverse of a lower-triangular packed factor, itself lower-triangular.
/// `‖L⁻¹ d‖²` is the Mahalanobis form used on the hot evaluation paths.
pub fn lower_inverse(l: &Packed<f64>, k: usize) -> Packed<f64> {
    let mut inv = [0.0; 6];
    for j in 0..k {
        let mut e = [0.0; 3];
        e[j] = 1.0;
        let y = solve_lower(l, &e, k);
        for i in j..k {
            inv[pidx(i, j)] = y[i];
        }
    }
    inv
}

/// Symmetric matrix–vector product.
pub fn sym_mul_vec<T: Real>(m: &Packed<T>, v: &Vector<T>, k: usize) -> Vector<T> {
    let mut out = [T::zero(); 3];
    for i in 0..k {
        let mut s = T::zero();
        for j in 0..k {
            s = s + m[pidx(i, j)] * v[j];
        }
        out[i] = s;
    }
    out
}

/// Clamps the eigenvalues of a symmetric matrix from below. Used as the
/// covariance floor in point-set EM, where clamping is the constrained
/// maximiser of the M step.
pub fn clamp_eigenvalues(m: &Packed<f64>, k: usize, floor: f64) -> Packed<f64> {
    let full = nalgebra::DMatrix::from_fn(k, k, |i, j| m[pidx(i, j)]);
    let eig = nalgebra::SymmetricEigen::new(full);
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let rebuilt = &eig.eigenvectors
        * nalgebra::DMatrix::from_diagonal(&vals)
        * eig.eigenvectors.transpose();
    let mut out = [0.0; 6];
    for i in 0..k {
        for j in 0..=i {
            out[pidx(i, j)] = 0.5 * (rebuilt[(i, j)] + rebuilt[(j, i)]);
        }
    }
    out
}

/// Smallest eigenvalue of a symmetric packed matrix.
pub fn min_eigenvalue(m: &Packed<f64>, k: usize) -> f64 {
    let full = nalgebra::DMatrix::from_fn(k, k, |i, j| m[pidx(i, j)]);
    nalgebra::SymmetricEigen::new(full)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
