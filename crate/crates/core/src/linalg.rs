//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below this are treated as a genuine loss of positive
/// semi-definiteness; values in `[-PSD_TOL, 0)` are clipped to zero.
pub const PSD_TOL: f64 = 1e-8;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute asymmetry `|m_ij - m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && asymmetry(m) <= tol * (1.0 + m.amax())
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Replace eigenvalues below `floor` with `floor` and rebuild the matrix.
pub fn clip_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let q = &eig.eigenvectors;
    symmetrize(&(q * DMatrix::from_diagonal(&vals) * q.transpose()))
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m)).ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))
}

/// Negative definite iff `-m` admits a Cholesky factorization.
pub fn is_negative_definite(m: &DMatrix<f64>) -> bool {
    Cholesky::new(-symmetrize(m)).is_some()
}

pub fn log_det_spd(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn ones(n: usize) -> DVector<f64> {
    DVector::from_element(n, 1.0)
}

pub fn check_square(m: &DMatrix<f64>, n: usize, what: &str) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::Dimension(format!(
            "{what}: expected {n}x{n}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// KL(N(m1, s1) || N(m0, s0)) in nats.
pub fn kl_gaussian(m1: &DVector<f64>, s1: &DMatrix<f64>, m0: &DVector<f64>, s0: &DMatrix<f64>) -> Result<f64> {
    let n = m1.len() as f64;
    let c0 = cholesky(s0, "reference covariance")?;
    let c1 = cholesky(s1, "policy covariance")?;
    let trace = c0.solve(s1).trace();
    let diff = m0 - m1;
    let maha = diff.dot(&c0.solve(&diff));
    Ok(0.5 * (trace + maha - n + log_det_spd(&c0) - log_det_spd(&c1)))
}
