//! Small dense linear algebra on top of `nalgebra`.
//!
//! Matrices here are desk-sized (a handful of assets), so every routine is a
//! direct dense method.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Relative singular-value threshold below which a direction counts as null.
pub const RANK_RTOL: f64 = 1e-10;

/// Eigenvalues of a PSD matrix smaller than this (relative to the largest
/// magnitude, floored at 1) are treated as round-off and clipped to zero.
pub const PSD_CLIP_TOL: f64 = 1e-12;

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn ensure_symmetric(m: &DMatrix<f64>, tol: f64) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension {
            what: "square matrix columns",
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    let asymmetry = max_asymmetry(m);
    if asymmetry > tol {
        return Err(Error::Asymmetric { asymmetry });
    }
    Ok(())
}

/// Replaces `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Solves `a x = b` by LU with partial pivoting. `None` when `a` is singular.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().lu().solve(b)
}

/// Singular values together with the numerical rank at [`RANK_RTOL`].
#[derive(Debug, Clone)]
pub struct RankInfo {
    pub rank: usize,
    pub singular_values: DVector<f64>,
}

pub fn rank_info(m: &DMatrix<f64>) -> RankInfo {
    let singular_values = m.clone().singular_values();
    let s_max = singular_values.iter().cloned().fold(0.0, f64::max);
    let rank = if s_max > 0.0 {
        singular_values
            .iter()
            .filter(|&&s| s > RANK_RTOL * s_max)
            .count()
    } else {
        0
    };
    RankInfo {
        rank,
        singular_values,
    }
}

/// Moore-Penrose pseudoinverse of `R = σσᵀ`, computed from the SVD of `σ`
/// so the retained directions match [`rank_info`] on `σ`.
pub fn gram_pseudoinverse(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let n = sigma.nrows();
    let svd = sigma.clone().svd(true, false);
    let u = svd.u.as_ref().expect("svd computed with U");
    let s_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let mut pinv = DMatrix::zeros(n, n);
    if s_max == 0.0 {
        return pinv;
    }
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > RANK_RTOL * s_max {
            let col = u.column(k);
            pinv += (col * col.transpose()) / (s * s);
        }
    }
    symmetrize(&mut pinv);
    pinv
}

/// Returns `L` with `L Lᵀ = cov` from a symmetric eigendecomposition.
///
/// Eigenvalues within [`PSD_CLIP_TOL`] of zero are clipped; anything more
/// negative is rejected.
pub fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_symmetric(cov, 1e-12 * cov.amax().max(1.0))?;
    let n = cov.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = cov.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut factor = eig.eigenvectors;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        let root = if lambda >= 0.0 {
            libm::sqrt(lambda)
        } else if lambda > -PSD_CLIP_TOL * scale {
            0.0
        } else {
            return Err(Error::NotPositiveSemidefinite { eigenvalue: lambda });
        };
        factor.column_mut(k).scale_mut(root);
    }
    Ok(factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn solve_with_pivoting() {
        // Zero leading entry forces a row swap.
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 3.0]);
        let b = DVector::from_vec(alloc::vec![4.0, 5.0]);
        let x = solve(&a, &b).unwrap();
        assert_relative_eq!(&a * &x, b, epsilon = 1e-14);
        assert!(solve(&DMatrix::from_element(2, 2, 1.0), &b).is_none());
    }

    #[test]
    fn rank_of_deficient_matrix() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 1.0, 1.0]);
        assert_eq!(rank_info(&m).rank, 2);
        assert_eq!(rank_info(&DMatrix::zeros(2, 2)).rank, 0);
        assert_eq!(rank_info(&DMatrix::identity(4, 4)).rank, 4);
    }

    #[test]
    fn factor_reproduces_covariance() {
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 1.0]);
        let l = psd_factor(&cov).unwrap();
        assert_relative_eq!(&l * l.transpose(), cov, epsilon = 1e-13);
    }

    #[test]
    fn factor_clips_roundoff_and_rejects_negative() {
        // Rank one with a tiny negative perturbation on the null direction.
        let mut cov = DMatrix::from_element(2, 2, 1.0);
        cov[(0, 0)] -= 1e-15;
        let l = psd_factor(&cov).unwrap();
        assert!(l.iter().all(|v| v.is_finite()));

        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(matches!(
            psd_factor(&bad),
            Err(Error::NotPositiveSemidefinite { .. })
        ));
    }

    #[test]
    fn asymmetric_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(
            ensure_symmetric(&m, 1e-10),
            Err(Error::Asymmetric { .. })
        ));
    }

    #[test]
    fn pseudoinverse_of_rank_one_gram() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let r = &sigma * sigma.transpose();
        let pinv = gram_pseudoinverse(&sigma);
        // Penrose conditions.
        assert_relative_eq!(&r * &pinv * &r, r.clone(), epsilon = 1e-12);
        assert_relative_eq!(&pinv * &r * &pinv, pinv.clone(), epsilon = 1e-12);
        assert_relative_eq!(pinv, DMatrix::from_element(2, 2, 0.25), epsilon = 1e-12);
    }
}
