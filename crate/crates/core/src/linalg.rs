//! Small dense linear-algebra helpers shared by the filters and the
//! certificate code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension {
            context: "symmetric eigenvalues",
            expected: m.nrows(),
            actual: m.ncols(),
        });
    }
    if m.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    if !all_finite_mat(m) {
        return Err(Error::non_finite(
            "eigen-solver input has non-finite entries",
            m.as_slice(),
        ));
    }
    let mut ev = symmetrize(m).symmetric_eigenvalues();
    ev.as_mut_slice().sort_by(|a, b| a.total_cmp(b));
    Ok(ev)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    let ev = sym_eigenvalues(m)?;
    Ok(ev.iter().copied().fold(f64::INFINITY, f64::min))
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    let ev = sym_eigenvalues(m)?;
    Ok(ev.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Ratio of extreme eigenvalue magnitudes of a symmetric matrix.
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    match sym_eigenvalues(m) {
        Ok(ev) if ev.len() > 0 => {
            let lo = ev.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
            let hi = ev.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
            if lo == 0.0 {
                f64::INFINITY
            } else {
                hi / lo
            }
        }
        _ => f64::NAN,
    }
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if !all_finite_mat(m) {
        return Err(Error::non_finite(
            format!("{what} has non-finite entries"),
            m.as_slice(),
        ));
    }
    Cholesky::new(symmetrize(m)).ok_or_else(|| Error::Numerical {
        reason: format!("{what} is not positive definite"),
        offending: None,
        condition: Some(condition_estimate(m)),
    })
}

/// Solves `S X = B` for symmetric positive definite `S`.
pub fn spd_solve(s: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(cholesky(s, what)?.solve(b))
}

/// Inverse of a symmetric positive definite matrix, returned symmetric.
pub fn spd_inverse(s: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&cholesky(s, what)?.inverse()))
}

/// General inverse via LU, for the (possibly non-symmetric) state matrix.
pub fn inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone().try_inverse().ok_or_else(|| Error::Numerical {
        reason: format!("{what} is singular"),
        offending: None,
        condition: None,
    })
}

/// Largest absolute eigenvalue of the symmetric part, i.e. its spectral norm.
pub fn sym_spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    let ev = sym_eigenvalues(m)?;
    Ok(ev.iter().fold(0.0_f64, |a, v| a.max(v.abs())))
}

pub fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_solve_matches_inverse() {
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let x = spd_solve(&s, &b, "S").unwrap();
        let r = &s * &x - &b;
        assert!(r.norm() < 1e-14);
    }

    #[test]
    fn indefinite_matrix_reports_condition() {
        let s = diag(&[1.0, -1.0]);
        match spd_solve(&s, &DMatrix::identity(2, 2), "S") {
            Err(Error::Numerical { condition, .. }) => assert_eq!(condition, Some(1.0)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn eigenvalues_sorted() {
        let m = diag(&[3.0, -1.0, 2.0]);
        let ev = sym_eigenvalues(&m).unwrap();
        assert_eq!(ev.as_slice(), &[-1.0, 2.0, 3.0]);
    }
}
