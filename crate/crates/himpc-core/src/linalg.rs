//! Small dense-matrix helpers shared by the estimation and planning code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// State vector of the task (4-dim for the 2D point mass: [px, py, vx, vy]).
pub type StateVec = DVector<f64>;
/// Control vector of the task (2-dim forces for the 2D point mass).
pub type ControlVec = DVector<f64>;

/// Force exact symmetry: (m + m^T) / 2.
pub fn symmetrize(m: &Matrix) -> Matrix {
    let mut s = m.clone();
    s += m.transpose();
    s *= 0.5;
    s
}

/// Add `ridge * I` in place.
pub fn add_ridge(m: &mut Matrix, ridge: f64) {
    let n = m.nrows().min(m.ncols());
    for i in 0..n {
        m[(i, i)] += ridge;
    }
}

/// Cholesky of a symmetric matrix after ridge regularization.
pub fn cholesky_ridged(m: &Matrix, ridge: f64) -> Option<Cholesky<f64, Dyn>> {
    let mut s = symmetrize(m);
    add_ridge(&mut s, ridge);
    Cholesky::new(s)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(m: &Matrix) -> f64 {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Maximum absolute entry-wise asymmetry, for symmetry assertions.
pub fn max_asymmetry(m: &Matrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}
