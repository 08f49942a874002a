//! The two special volatility structures and their expected total fractions.
//!
//! *Bidiagonal*: `σ` on the diagonal and superdiagonal, so each asset only
//! correlates with its neighbour. *Triangular*: `σ` times the lower-triangular
//! matrix of ones, a global correlation structure whose inverse is `σ⁻¹`
//! times the lower bidiagonal matrix with `1` on the diagonal and `−1` below.

use nalgebra::{DMatrix, DVector};
use num_rational::Ratio;

use crate::kelly::{self, FractionVector};
use crate::linalg;
use crate::market::MarketParams;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StructureKind {
    Bidiagonal { n: usize, sigma: f64 },
    Triangular { n: usize, sigma: f64 },
}

impl StructureKind {
    pub fn n(&self) -> usize {
        match *self {
            StructureKind::Bidiagonal { n, .. } | StructureKind::Triangular { n, .. } => n,
        }
    }

    pub fn scale(&self) -> f64 {
        match *self {
            StructureKind::Bidiagonal { sigma, .. } | StructureKind::Triangular { sigma, .. } => {
                sigma
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n() < 2 {
            return Err(Error::StructureTooSmall { n: self.n() });
        }
        let s = self.scale();
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::invalid("structure sigma", "must be positive"));
        }
        Ok(())
    }
}

/// Builds the volatility matrix of the given structure.
pub fn build_sigma(kind: StructureKind) -> Result<DMatrix<f64>> {
    kind.validate()?;
    let n = kind.n();
    let s = kind.scale();
    let sigma = match kind {
        StructureKind::Bidiagonal { .. } => {
            DMatrix::from_fn(n, n, |i, j| if j == i || j == i + 1 { s } else { 0.0 })
        }
        StructureKind::Triangular { .. } => {
            let sigma = DMatrix::from_fn(n, n, |i, j| if j <= i { s } else { 0.0 });
            let check = &sigma * triangular_inverse(n, s)?;
            let gap = (check - DMatrix::identity(n, n)).amax();
            debug_assert!(gap <= 1e-12, "triangular inverse off by {gap}");
            sigma
        }
    };
    Ok(sigma)
}

/// Closed-form inverse of the triangular structure.
pub fn triangular_inverse(n: usize, sigma: f64) -> Result<DMatrix<f64>> {
    StructureKind::Triangular { n, sigma }.validate()?;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0 / sigma
        } else if j + 1 == i {
            -1.0 / sigma
        } else {
            0.0
        }
    }))
}

/// Long-run expected total Kelly fraction in the bidiagonal market at zero
/// rate: `(n+1)/4` for odd `n`, `n/4` for even `n`.
pub fn bidiagonal_limit_expected_total_fraction(n: usize) -> Result<Ratio<u64>> {
    if n < 2 {
        return Err(Error::StructureTooSmall { n });
    }
    let n = n as u64;
    Ok(if n % 2 == 1 {
        Ratio::new(n + 1, 4)
    } else {
        Ratio::new(n, 4)
    })
}

/// Independent route to the bidiagonal limit.
///
/// At stationarity with `r = 0`, `E[a_i − b_i x_i] = 0`, leaving
/// `E[c_i] = ½‖σ_i‖²`; the expected total fraction is `1ᵀR⁻¹E[c]`.
pub fn bidiagonal_limit_oracle(n: usize, sigma: f64) -> Result<f64> {
    let s = build_sigma(StructureKind::Bidiagonal { n, sigma })?;
    let r = &s * s.transpose();
    let half_norms = DVector::from_iterator(n, s.row_iter().map(|row| 0.5 * row.norm_squared()));
    let y = linalg::solve(&r, &half_norms).ok_or(Error::SingularVolatility { rank: n - 1, n })?;
    Ok(y.sum())
}

/// Expected Kelly fractions under the stationary law of any market with all
/// `b_i > 0`: `R⁻¹E[c]` with `E[c_i] = a_i − b_i (a_i/b_i) + ½‖σ_i‖² − r`.
pub fn stationary_expected_fractions(params: &MarketParams) -> Result<FractionVector> {
    let mean_x = params.stationary_mean_log()?;
    let expected_c = params.excess_return_at(&mean_x);
    Ok(kelly::fraction_from_excess(params, &expected_c))
}

/// Kelly fractions in the triangular market from the scaled excess returns
/// `ĉ_i = (μ_i − r)/σ²`.
pub fn triangular_fractions(c_hat: &[f64]) -> Result<FractionVector> {
    let n = c_hat.len();
    if n < 2 {
        return Err(Error::StructureTooSmall { n });
    }
    let f = DVector::from_fn(n, |i, _| {
        if i == 0 {
            c_hat[0] - (c_hat[1] - c_hat[0])
        } else if i == n - 1 {
            c_hat[n - 1] - c_hat[n - 2]
        } else {
            (c_hat[i] - c_hat[i - 1]) - (c_hat[i + 1] - c_hat[i])
        }
    });
    FractionVector::new(f)
}

/// Expected total triangular fraction at time `t`:
/// `((a₁ − b₁ log S₁(0)) e^{−b₁t} + ½σ² − r) / σ²`.
pub fn triangular_expected_total_fraction(
    a1: f64,
    b1: f64,
    sigma: f64,
    r: f64,
    s1_0: f64,
    t: f64,
) -> Result<f64> {
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::invalid("t", "must be finite and >= 0"));
    }
    if !(b1.is_finite() && b1 >= 0.0) {
        return Err(Error::invalid("b1", "must be >= 0"));
    }
    if !(s1_0.is_finite() && s1_0 > 0.0) {
        return Err(Error::invalid("s1_0", "must be positive"));
    }
    let var = sigma * sigma;
    Ok(((a1 - b1 * libm::log(s1_0)) * libm::exp(-b1 * t) + 0.5 * var - r) / var)
}

/// Long-run limit of the expected total triangular fraction. Discontinuous in
/// `b₁` at zero.
pub fn limit_expected_total_fraction(a1: f64, b1: f64, sigma: f64, r: f64) -> Result<f64> {
    if !(b1.is_finite() && b1 >= 0.0) {
        return Err(Error::invalid("b1", "must be >= 0"));
    }
    let var = sigma * sigma;
    Ok(if b1 == 0.0 {
        (a1 + 0.5 * var - r) / var
    } else {
        (0.5 * var - r) / var
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kelly::kelly_fraction;
    use crate::market::MarketState;
    use alloc::vec;
    use alloc::vec::Vec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn displayed_matrices() {
        let tri = build_sigma(StructureKind::Triangular { n: 2, sigma: 0.1 }).unwrap();
        assert_eq!(tri, DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.1, 0.1]));
        let bi = build_sigma(StructureKind::Bidiagonal { n: 2, sigma: 0.1 }).unwrap();
        assert_eq!(bi, DMatrix::from_row_slice(2, 2, &[0.1, 0.1, 0.0, 0.1]));
        let inv = triangular_inverse(3, 0.5).unwrap();
        let want =
            DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0, -1.0, 1.0]) / 0.5;
        assert_eq!(inv, want);
        for n in 2..12 {
            let s = build_sigma(StructureKind::Triangular { n, sigma: 0.3 }).unwrap();
            let gap = (&s * triangular_inverse(n, 0.3).unwrap() - DMatrix::identity(n, n)).amax();
            assert!(gap <= 1e-12);
        }
    }

    #[test]
    fn too_small_rejected() {
        assert_eq!(
            build_sigma(StructureKind::Bidiagonal { n: 1, sigma: 0.1 }),
            Err(Error::StructureTooSmall { n: 1 })
        );
        assert!(build_sigma(StructureKind::Triangular { n: 3, sigma: 0.0 }).is_err());
        assert!(bidiagonal_limit_expected_total_fraction(1).is_err());
        assert!(triangular_fractions(&[1.0]).is_err());
    }

    #[test]
    fn limit_table() {
        let r = |n| bidiagonal_limit_expected_total_fraction(n).unwrap();
        assert_eq!(r(2), Ratio::new(1, 2));
        assert_eq!(r(3), Ratio::from_integer(1));
        assert_eq!(r(4), r(3));
        assert_eq!(r(5), Ratio::new(3, 2));
        assert_eq!(r(6), r(5));
    }

    #[test]
    fn oracle_hand_cases() {
        assert_relative_eq!(
            bidiagonal_limit_oracle(2, 0.1).unwrap(),
            0.5,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            bidiagonal_limit_oracle(3, 0.1).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let base = bidiagonal_limit_oracle(5, 0.1).unwrap();
        for s in [0.05, 0.4] {
            assert_relative_eq!(
                bidiagonal_limit_oracle(5, s).unwrap(),
                base,
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn triangular_examples() {
        let f = triangular_fractions(&[1.0, 2.0]).unwrap();
        assert_eq!(f.as_vector().as_slice(), &[0.0, 1.0]);
        let f = triangular_fractions(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(f.as_vector().as_slice(), &[0.0, 0.0, 1.0]);
        let f = triangular_fractions(&[0.7; 5]).unwrap();
        assert_eq!(f.as_vector().as_slice(), &[0.7, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn expected_total_fraction_curve() {
        let ln10 = core::f64::consts::LN_10;
        let t0 = triangular_expected_total_fraction(0.5, 0.2, 0.1, 0.03, 10.0, 0.0).unwrap();
        assert_relative_eq!(
            t0,
            (0.5 - 0.2 * ln10 + 0.005 - 0.03) / 0.01,
            epsilon = 1e-12
        );
        assert_relative_eq!(t0, 1.44829814, epsilon = 1e-8);
        let t20 = triangular_expected_total_fraction(0.5, 0.2, 0.1, 0.03, 10.0, 20.0).unwrap();
        assert_relative_eq!(t20, -2.427684397, epsilon = 1e-8);
        let far = triangular_expected_total_fraction(0.5, 0.2, 0.1, 0.03, 10.0, 1e4).unwrap();
        assert_relative_eq!(far, -2.5, epsilon = 1e-12);
        let flat = triangular_expected_total_fraction(0.5, 0.0, 0.1, 0.03, 10.0, 1e4).unwrap();
        assert_relative_eq!(flat, 47.5, epsilon = 1e-12);
    }

    #[test]
    fn limits() {
        assert_relative_eq!(
            limit_expected_total_fraction(0.5, 0.2, 0.1, 0.03).unwrap(),
            -2.5,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            limit_expected_total_fraction(0.5, 0.0, 0.1, 0.03).unwrap(),
            47.5,
            epsilon = 1e-12
        );
        // r = ½σ² with binary-exact values.
        assert_eq!(
            limit_expected_total_fraction(0.5, 0.3, 0.5, 0.125).unwrap(),
            0.0
        );
        assert!(limit_expected_total_fraction(0.5, -0.1, 0.1, 0.0).is_err());
    }

    #[test]
    fn curve_converges_monotonically() {
        let lim = limit_expected_total_fraction(0.5, 0.2, 0.1, 0.03).unwrap();
        let gaps: Vec<f64> = (0..60)
            .map(|k| {
                let t = k as f64 * 0.5;
                (triangular_expected_total_fraction(0.5, 0.2, 0.1, 0.03, 10.0, t).unwrap() - lim)
                    .abs()
            })
            .collect();
        assert!(gaps.windows(2).all(|w| w[1] < w[0]));
    }

    proptest! {
        #[test]
        fn oracle_matches_closed_form(n in 2usize..=12, sigma in 0.01..2.0f64) {
            let closed = bidiagonal_limit_expected_total_fraction(n).unwrap();
            let value = *closed.numer() as f64 / *closed.denom() as f64;
            prop_assert!((bidiagonal_limit_oracle(n, sigma).unwrap() - value).abs() < 1e-10);
        }

        #[test]
        fn triangular_matches_general_solver(
            n in 2usize..=10,
            sigma in 0.05..0.5f64,
            xs in proptest::collection::vec(-2.0..2.0f64, 10),
            a in proptest::collection::vec(-0.5..0.5f64, 10),
            b in proptest::collection::vec(0.0..1.0f64, 10),
            r in 0.0..0.05f64,
        ) {
            let p = MarketParams::new(
                DVector::from_row_slice(&a[..n]),
                DVector::from_row_slice(&b[..n]),
                build_sigma(StructureKind::Triangular { n, sigma }).unwrap(),
                r,
                DVector::from_element(n, 1.0),
            ).unwrap();
            let st = MarketState::new(&p, 0.0, DVector::from_row_slice(&xs[..n])).unwrap();
            let c_hat: Vec<f64> = p.excess_return(&st).iter().map(|c| c / (sigma * sigma)).collect();
            let closed = triangular_fractions(&c_hat).unwrap();
            let general = kelly_fraction(&p, &st);
            prop_assert!((closed.as_vector() - general.as_vector()).amax() <= 1e-10 * c_hat.iter().fold(1.0f64, |m, v| m.max(v.abs())));
            prop_assert!((closed.total() - c_hat[0]).abs() <= 1e-12 * c_hat[0].abs().max(1.0));
        }
    }

    #[test]
    fn stationary_fractions_reproduce_bidiagonal_limit() {
        for n in 2..=7 {
            let p = MarketParams::new(
                DVector::from_fn(n, |i, _| 0.1 + 0.05 * i as f64),
                DVector::from_fn(n, |i, _| 0.5 + 0.3 * i as f64),
                build_sigma(StructureKind::Bidiagonal { n, sigma: 0.2 }).unwrap(),
                0.0,
                DVector::from_element(n, 1.0),
            )
            .unwrap();
            let total = stationary_expected_fractions(&p).unwrap().total();
            assert_relative_eq!(
                total,
                bidiagonal_limit_oracle(n, 0.2).unwrap(),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn triangular_sum_is_first_component() {
        let c_hat = vec![0.3, -1.2, 4.5, 2.2];
        let f = triangular_fractions(&c_hat).unwrap();
        assert_relative_eq!(f.total(), 0.3, epsilon = 1e-15);
    }
}
