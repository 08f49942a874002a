//! Market price of risk, Kelly fractions and replicating holdings.

use nalgebra::{DMatrix, DVector};

use crate::linalg;
use crate::market::{MarketParams, MarketState};
use crate::{Error, Result};

/// Market price of risk `θ`, the solution of `σθ = c`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskPremium {
    pub theta: DVector<f64>,
}

impl RiskPremium {
    pub fn norm_sq(&self) -> f64 {
        self.theta.norm_squared()
    }
}

/// Fractions of wealth held in each risky asset. The cash fraction is
/// `1 − Σf` and may be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionVector {
    f: DVector<f64>,
    pseudo: bool,
}

impl FractionVector {
    pub fn new(f: DVector<f64>) -> Result<Self> {
        if !f.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("fractions", "entries must be finite"));
        }
        Ok(FractionVector { f, pseudo: false })
    }

    pub fn zeros(n: usize) -> Self {
        FractionVector {
            f: DVector::zeros(n),
            pseudo: false,
        }
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.f
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.f
    }

    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }

    /// Set when the fractions came from the pseudoinverse of a singular `R`,
    /// i.e. the market is incomplete.
    pub fn is_pseudo(&self) -> bool {
        self.pseudo
    }

    pub fn total(&self) -> f64 {
        self.f.sum()
    }

    pub fn gross(&self) -> f64 {
        self.f.lp_norm(1)
    }

    pub fn cash_fraction(&self) -> f64 {
        1.0 - self.total()
    }

    pub fn scaled(&self, lambda: f64) -> Self {
        FractionVector {
            f: &self.f * lambda,
            pseudo: self.pseudo,
        }
    }
}

/// Units held of the savings account and of each asset.
#[derive(Debug, Clone, PartialEq)]
pub struct Holdings {
    pub cash_units: f64,
    pub asset_units: DVector<f64>,
}

impl Holdings {
    /// `φ_i = f_i V / S_i`, `φ₀ = (1 − Σf) V / B`.
    pub fn from_fractions(f: &FractionVector, state: &MarketState, wealth: f64) -> Result<Self> {
        if !(wealth.is_finite() && wealth > 0.0) {
            return Err(Error::invalid("wealth", "must be positive"));
        }
        Error::check_len("fractions", state.x().len(), f.len())?;
        let prices = state.prices();
        Ok(Holdings {
            cash_units: f.cash_fraction() * wealth / state.bank(),
            asset_units: f.as_vector().component_div(&prices) * wealth,
        })
    }

    /// `φ₀ B + φ·S`.
    pub fn value(&self, state: &MarketState) -> f64 {
        self.cash_units * state.bank() + self.asset_units.dot(&state.prices())
    }

    /// Reads the holdings back as wealth fractions `φ_i S_i / V`.
    pub fn fractions(&self, state: &MarketState, wealth: f64) -> DVector<f64> {
        self.asset_units.component_mul(&state.prices()) / wealth
    }
}

/// Solves `σθ = c` for the current state.
pub fn market_price_of_risk(params: &MarketParams, state: &MarketState) -> Result<RiskPremium> {
    theta_from_excess(params, &params.excess_return(state)).map(|theta| RiskPremium { theta })
}

/// `σ⁻¹c` for a given excess-return vector.
pub fn theta_from_excess(params: &MarketParams, c: &DVector<f64>) -> Result<DVector<f64>> {
    let lu = params.sigma_lu().ok_or(Error::SingularVolatility {
        rank: params.sigma_rank(),
        n: params.n(),
    })?;
    lu.solve(c).ok_or(Error::SingularVolatility {
        rank: params.sigma_rank(),
        n: params.n(),
    })
}

/// Kelly-optimal fractions `f* = R⁻¹c`.
///
/// For singular `R` this is the minimum-norm least-squares solution `R⁺c`
/// and the result is flagged [`FractionVector::is_pseudo`].
pub fn kelly_fraction(params: &MarketParams, state: &MarketState) -> FractionVector {
    fraction_from_excess(params, &params.excess_return(state))
}

pub fn fraction_from_excess(params: &MarketParams, c: &DVector<f64>) -> FractionVector {
    if let Some(f) = params.cov_lu().and_then(|lu| lu.solve(c)) {
        return FractionVector { f, pseudo: false };
    }
    let pinv = match params.cov_pinv() {
        Some(p) => p.clone(),
        // Full rank by the SVD test but LU hit an exact zero pivot.
        None => linalg::gram_pseudoinverse(params.sigma()),
    };
    FractionVector {
        f: pinv * c,
        pseudo: true,
    }
}

/// Holdings of the optimal strategy for wealth `wealth` at `state`.
pub fn replicating_holdings(
    params: &MarketParams,
    state: &MarketState,
    wealth: f64,
) -> Result<Holdings> {
    if !params.is_complete() {
        return Err(Error::SingularVolatility {
            rank: params.sigma_rank(),
            n: params.n(),
        });
    }
    Holdings::from_fractions(&kelly_fraction(params, state), state, wealth)
}

/// Mean-variance objective `cᵀx − ½xᵀRx`.
pub fn mean_variance_objective(
    c: &DVector<f64>,
    r: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Result<f64> {
    Error::check_len("c", r.nrows(), c.len())?;
    Error::check_len("x", r.nrows(), x.len())?;
    linalg::ensure_symmetric(r, 1e-10)?;
    Ok(excess_growth(c, r, x))
}

/// `fᵀc − ½fᵀRf` without input checks.
pub(crate) fn excess_growth(c: &DVector<f64>, r: &DMatrix<f64>, f: &DVector<f64>) -> f64 {
    f.dot(c) - 0.5 * f.dot(&(r * f))
}

/// Instantaneous drift of log-wealth under fractions `f`: `r + fᵀc − ½fᵀRf`.
pub fn growth_rate(params: &MarketParams, state: &MarketState, f: &FractionVector) -> f64 {
    params.r()
        + excess_growth(
            &params.excess_return(state),
            params.cov_rate(),
            f.as_vector(),
        )
}
