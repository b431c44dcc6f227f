//! Small dense helpers shared by the estimators.

use nalgebra::{ComplexField, DMatrix, DVector};

use crate::txchain::C64;

/// Solves `A X = B` for Hermitian positive-definite `A`.
pub fn solve_hpd<T: ComplexField + Copy>(a: DMatrix<T>, b: &DMatrix<T>) -> Option<DMatrix<T>> {
    let chol = a.cholesky()?;
    let x = chol.solve(b);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

pub fn inverse_hpd<T: ComplexField + Copy>(a: DMatrix<T>) -> Option<DMatrix<T>> {
    let n = a.nrows();
    solve_hpd(a, &DMatrix::identity(n, n))
}

/// `X Y^H` without materializing the adjoint.
pub fn mul_adjoint(x: &DMatrix<C64>, y: &DMatrix<C64>) -> DMatrix<C64> {
    x * y.adjoint()
}

/// Gram matrix `Z Z^H + ridge I`.
pub fn gram(z: &DMatrix<C64>, ridge: f64) -> DMatrix<C64> {
    let mut g = z * z.adjoint();
    for i in 0..g.nrows() {
        g[(i, i)] += C64::new(ridge, 0.0);
    }
    g
}

/// Largest absolute deviation from Hermitian symmetry.
pub fn hermitian_defect(a: &DMatrix<C64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn column(m: &DMatrix<C64>, j: usize) -> DVector<C64> {
    m.column(j).into_owned()
}
