//! Small dense helpers on top of nalgebra: symmetrization, eigenvalue
//! flooring and SPD solves with a single jitter retry.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::scalar::{lit, Real};

/// Minimum eigenvalue enforced on every covariance matrix.
pub const PSD_FLOOR: f64 = 1e-9;

pub fn psd_floor<T: Real>() -> T {
    lit(PSD_FLOOR)
}

/// Replaces `m` by `(m + mᵀ) / 2` in place.
pub fn symmetrize<T: Real>(m: &mut DMatrix<T>) {
    let half = lit::<T>(0.5);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetric<T: Real>(mut m: DMatrix<T>) -> DMatrix<T> {
    symmetrize(&mut m);
    m
}

/// Symmetrizes and lifts every eigenvalue below `floor` up to `floor`.
///
/// Matrices whose spectrum already clears the floor are returned unchanged
/// after symmetrization.
pub fn floor_eigenvalues<T: Real>(m: DMatrix<T>, floor: T) -> DMatrix<T> {
    let mut m = symmetric(m);
    let n = m.nrows();
    let shifted = &m - DMatrix::<T>::identity(n, n) * floor;
    if Cholesky::new(shifted).is_some() {
        return m;
    }
    let eig = m.clone().symmetric_eigen();
    let clipped = eig.eigenvalues.map(|v| if v > floor { v } else { floor });
    m = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(&mut m);
    m
}

/// `floor_eigenvalues` with the crate-wide floor.
pub fn psd_project<T: Real>(m: DMatrix<T>) -> DMatrix<T> {
    floor_eigenvalues(m, psd_floor())
}

/// Cholesky factorization retried once with `PSD_FLOOR` added to the diagonal.
pub fn factor_spd<T: Real>(m: &DMatrix<T>) -> Option<Cholesky<T, Dyn>> {
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Some(ch);
    }
    let n = m.nrows();
    let mut jittered = m.clone();
    for i in 0..n {
        jittered[(i, i)] += psd_floor::<T>();
    }
    Cholesky::new(jittered)
}

/// `log |M|` from a Cholesky factor.
pub fn log_det<T: Real>(ch: &Cholesky<T, Dyn>) -> T {
    let l = ch.l_dirty();
    let mut acc = T::zero();
    for i in 0..l.nrows() {
        acc += l[(i, i)].ln();
    }
    acc * lit(2.0)
}

/// Solves `X · G = B` for `X` with `G` symmetric positive definite, i.e.
/// `X = B G⁻¹`.
pub fn right_solve_spd<T: Real>(b: &DMatrix<T>, g: &DMatrix<T>) -> Option<DMatrix<T>> {
    let ch = factor_spd(g)?;
    Some(ch.solve(&b.transpose()).transpose())
}

/// `dst += alpha * src` without a temporary.
#[inline]
pub fn add_scaled<T: Real>(dst: &mut DMatrix<T>, alpha: T, src: &DMatrix<T>) {
    dst.zip_apply(src, |a, b| *a += alpha * b);
}

pub fn outer<T: Real>(a: &DVector<T>, b: &DVector<T>) -> DMatrix<T> {
    a * b.transpose()
}

pub fn is_finite_matrix<T: Real>(m: &DMatrix<T>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn is_finite_vector<T: Real>(v: &DVector<T>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    let eig = symmetric(m.clone()).symmetric_eigen();
    eig.eigenvalues.iter().copied().fold(T::max_value().unwrap(), |a, b| if b < a { b } else { a })
}

/// Symmetric PSD square root `S` with `S Sᵀ = m`, via eigendecomposition.
pub fn psd_sqrt<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let eig = symmetric(m.clone()).symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| if v > T::zero() { v.sqrt() } else { T::zero() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}
