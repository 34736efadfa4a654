//! Dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Ridge added to normal equations so rank-deficient designs stay solvable.
pub const NORMAL_EQUATIONS_RIDGE: f64 = 1e-9;

/// Refinement sweeps applied on top of the ridge solve. Each sweep shrinks the
/// ridge bias by a factor `λ / (σ² + λ)` on every direction with singular
/// value `σ`, converging to the minimum-norm least-squares solution.
const REFINEMENT_SWEEPS: usize = 4;

/// Solves `a · x = b` by LU with partial pivoting.
pub fn solve_dense(a: DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.nrows() {
        return Err(Error::Shape(format!(
            "cannot solve {}x{} system with {}x{} right-hand side",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    a.lu()
        .solve(b)
        .ok_or_else(|| Error::Numerical("singular matrix in dense solve".into()))
}

/// Least-squares weights `θ = argmin ‖X θ − y‖²` through the normal equations.
///
/// Uses `(XᵀX + λI)` with [`NORMAL_EQUATIONS_RIDGE`] as the factorised
/// operator and iterates the residual correction, so the result matches the
/// minimum-norm solution on rank-deficient designs.
pub fn least_squares(design: &DMatrix<f64>, targets: &DVector<f64>) -> Result<DVector<f64>> {
    if design.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "design has {} rows but {} targets",
            design.nrows(),
            targets.len()
        )));
    }
    let d = design.ncols();
    let gram = design.transpose() * design + DMatrix::identity(d, d) * NORMAL_EQUATIONS_RIDGE;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("normal equations are not positive definite".into()))?;
    let mut theta = DVector::zeros(d);
    for _ in 0..=REFINEMENT_SWEEPS {
        let residual = targets - design * &theta;
        theta += chol.solve(&(design.transpose() * residual));
    }
    Ok(theta)
}
