//! Market parameters, state and the exact transition law of the log-prices.
//!
//! Log-prices follow `dx = (a − b∘x) dt + σ dW` with `b` acting as a diagonal
//! matrix, and the savings account grows as `B_t = exp(r t)`.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, LU};

use crate::linalg::{self, RankInfo};
use crate::{Error, Result};

/// The `(a, b, σ, r, S₀)` tuple of an n-asset OU market, plus quantities
/// derived from `σ` once at construction.
#[derive(Debug, Clone)]
pub struct MarketParams {
    a: DVector<f64>,
    b: DVector<f64>,
    sigma: DMatrix<f64>,
    r: f64,
    s0: DVector<f64>,
    cov_rate: DMatrix<f64>,
    row_norms_sq: DVector<f64>,
    rank: RankInfo,
    sigma_lu: Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    cov_lu: Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    cov_pinv: Option<DMatrix<f64>>,
}

impl MarketParams {
    /// Validates and builds the market.
    ///
    /// Rank-deficient `sigma` is accepted; see [`MarketParams::is_complete`].
    pub fn new(
        a: DVector<f64>,
        b: DVector<f64>,
        sigma: DMatrix<f64>,
        r: f64,
        s0: DVector<f64>,
    ) -> Result<Self> {
        let n = a.len();
        if n == 0 {
            return Err(Error::invalid("n", "need at least one asset"));
        }
        Error::check_len("b", n, b.len())?;
        Error::check_len("s0", n, s0.len())?;
        Error::check_len("sigma rows", n, sigma.nrows())?;
        Error::check_len("sigma columns", n, sigma.ncols())?;
        if !a.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("a", "entries must be finite"));
        }
        if !b.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::invalid("b", "entries must be finite and >= 0"));
        }
        if !sigma.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("sigma", "entries must be finite"));
        }
        if !r.is_finite() {
            return Err(Error::invalid("r", "must be finite"));
        }
        if !s0.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::invalid("s0", "prices must be positive"));
        }

        let mut cov_rate = &sigma * sigma.transpose();
        linalg::ensure_symmetric(&cov_rate, 1e-12 * cov_rate.amax().max(1.0))?;
        linalg::symmetrize(&mut cov_rate);
        let row_norms_sq =
            DVector::from_iterator(n, sigma.row_iter().map(|row| row.norm_squared()));

        let rank = linalg::rank_info(&sigma);
        let (sigma_lu, cov_lu, cov_pinv) = if rank.rank == n {
            (Some(sigma.clone().lu()), Some(cov_rate.clone().lu()), None)
        } else {
            (None, None, Some(linalg::gram_pseudoinverse(&sigma)))
        };

        Ok(MarketParams {
            a,
            b,
            sigma,
            r,
            s0,
            cov_rate,
            row_norms_sq,
            rank,
            sigma_lu,
            cov_lu,
            cov_pinv,
        })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self) -> &DVector<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn s0(&self) -> &DVector<f64> {
        &self.s0
    }

    /// `R = σσᵀ`, the instantaneous covariance rate of log-returns.
    pub fn cov_rate(&self) -> &DMatrix<f64> {
        &self.cov_rate
    }

    /// `‖σ_i‖²` for every row `i` of `σ`.
    pub fn row_norms_sq(&self) -> &DVector<f64> {
        &self.row_norms_sq
    }

    pub fn sigma_rank(&self) -> usize {
        self.rank.rank
    }

    pub fn sigma_singular_values(&self) -> &DVector<f64> {
        &self.rank.singular_values
    }

    /// True when `σ` has full rank, i.e. the market price of risk exists and
    /// the market is complete.
    pub fn is_complete(&self) -> bool {
        self.rank.rank == self.n()
    }

    pub(crate) fn sigma_lu(&self) -> Option<&LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
        self.sigma_lu.as_ref()
    }

    pub(crate) fn cov_lu(&self) -> Option<&LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
        self.cov_lu.as_ref()
    }

    pub(crate) fn cov_pinv(&self) -> Option<&DMatrix<f64>> {
        self.cov_pinv.as_ref()
    }

    /// Returns a copy with a different short rate.
    pub fn with_rate(&self, r: f64) -> Result<Self> {
        if !r.is_finite() {
            return Err(Error::invalid("r", "must be finite"));
        }
        let mut out = self.clone();
        out.r = r;
        Ok(out)
    }

    /// Drift of the prices, `μ_i = a_i − b_i x_i + ½‖σ_i‖²`.
    pub fn drift(&self, state: &MarketState) -> DVector<f64> {
        self.drift_at(&state.x)
    }

    pub fn drift_at(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n(), |i, _| {
            self.a[i] - self.b[i] * x[i] + 0.5 * self.row_norms_sq[i]
        })
    }

    /// Excess return over the short rate, `c = μ − r·1`.
    pub fn excess_return(&self, state: &MarketState) -> DVector<f64> {
        self.excess_return_at(&state.x)
    }

    pub fn excess_return_at(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut c = self.drift_at(x);
        c.add_scalar_mut(-self.r);
        c
    }

    /// Precomputes the exact one-step transition for a fixed `dt`.
    pub fn propagator(&self, dt: f64) -> Result<OuPropagator> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("dt", "must be positive and finite"));
        }
        let n = self.n();
        let decay = DVector::from_fn(n, |i, _| libm::exp(-self.b[i] * dt));
        let offset = DVector::from_fn(n, |i, _| {
            let bi = self.b[i];
            if bi > 0.0 {
                self.a[i] / bi * -libm::expm1(-bi * dt)
            } else {
                self.a[i] * dt
            }
        });
        let mut cov = DMatrix::from_fn(n, n, |i, j| {
            let rate = self.b[i] + self.b[j];
            let weight = if rate > 0.0 {
                -libm::expm1(-rate * dt) / rate
            } else {
                dt
            };
            self.cov_rate[(i, j)] * weight
        });
        linalg::symmetrize(&mut cov);
        let factor = linalg::psd_factor(&cov)?;
        Ok(OuPropagator {
            dt,
            decay,
            offset,
            cov,
            factor,
        })
    }

    /// Exact Gaussian law of `x_{t+dt}` given the current state.
    pub fn transition_law(&self, state: &MarketState, dt: f64) -> Result<GaussianStep> {
        Ok(self.propagator(dt)?.law(&state.x))
    }

    /// Mean of the stationary log-price law, `a_i / b_i`.
    pub fn stationary_mean_log(&self) -> Result<DVector<f64>> {
        if let Some(index) = self.b.iter().position(|&bi| bi == 0.0) {
            return Err(Error::NoStationaryDistribution { index });
        }
        Ok(self.a.component_div(&self.b))
    }
}

/// Time, log-prices and the savings account value.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    t: f64,
    x: DVector<f64>,
    bank: f64,
}

impl MarketState {
    pub fn new(params: &MarketParams, t: f64, x: DVector<f64>) -> Result<Self> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::invalid("t", "must be finite and >= 0"));
        }
        Error::check_len("x", params.n(), x.len())?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("x", "log-prices must be finite"));
        }
        Ok(MarketState {
            t,
            x,
            bank: libm::exp(params.r * t),
        })
    }

    pub fn from_prices(params: &MarketParams, t: f64, prices: &DVector<f64>) -> Result<Self> {
        if !prices.iter().all(|&p| p.is_finite() && p > 0.0) {
            return Err(Error::invalid("prices", "must be positive"));
        }
        Self::new(params, t, prices.map(libm::log))
    }

    /// The state at `t = 0` with prices `S₀`.
    pub fn initial(params: &MarketParams) -> Self {
        MarketState {
            t: 0.0,
            x: params.s0.map(libm::log),
            bank: 1.0,
        }
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    /// `B_t = exp(r t)`.
    pub fn bank(&self) -> f64 {
        self.bank
    }

    pub fn prices(&self) -> DVector<f64> {
        self.x.map(libm::exp)
    }

    /// `S̃_t = S_t / B_t`.
    pub fn discounted_prices(&self) -> DVector<f64> {
        self.x.map(|xi| libm::exp(xi) / self.bank)
    }
}

/// One-step Gaussian transition law of `x` with its covariance factor.
#[derive(Debug, Clone)]
pub struct GaussianStep {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl GaussianStep {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Error::check_len("cov", mean.len(), cov.nrows())?;
        let factor = linalg::psd_factor(&cov)?;
        Ok(GaussianStep { mean, cov, factor })
    }

    /// `L` with `L Lᵀ = cov`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// Returns `mean + L·noise` for a vector of standard normals.
    pub fn sample(&self, noise: &DVector<f64>) -> Result<DVector<f64>> {
        Error::check_len("noise", self.mean.len(), noise.len())?;
        Ok(&self.mean + &self.factor * noise)
    }
}

/// Exact OU transition for a fixed step `dt`, reusable along a path.
#[derive(Debug, Clone)]
pub struct OuPropagator {
    dt: f64,
    decay: DVector<f64>,
    offset: DVector<f64>,
    cov: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl OuPropagator {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// Conditional mean `e^{−b dt}∘x + m`.
    pub fn mean(&self, x: &DVector<f64>) -> DVector<f64> {
        self.decay.component_mul(x) + &self.offset
    }

    pub fn law(&self, x: &DVector<f64>) -> GaussianStep {
        GaussianStep {
            mean: self.mean(x),
            cov: self.cov.clone(),
            factor: self.factor.clone(),
        }
    }

    /// Martingale part of one step, `L·noise`.
    pub fn shock(&self, noise: &DVector<f64>) -> DVector<f64> {
        &self.factor * noise
    }
}

/// Builds a diagonal-`σ` market from per-asset scalars; handy for
/// single-asset and independent-asset setups.
pub fn independent_market(
    a: &[f64],
    b: &[f64],
    vols: &[f64],
    r: f64,
    s0: &[f64],
) -> Result<MarketParams> {
    let sigma = DMatrix::from_diagonal(&DVector::from_vec(Vec::from(vols)));
    MarketParams::new(
        DVector::from_vec(Vec::from(a)),
        DVector::from_vec(Vec::from(b)),
        sigma,
        r,
        DVector::from_vec(Vec::from(s0)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_relative_eq;
    use core::f64::consts::LN_10;
    use proptest::prelude::*;

    fn example_market() -> MarketParams {
        independent_market(&[0.5], &[0.2], &[0.1], 0.03, &[10.0]).unwrap()
    }

    fn bidiagonal2(a: [f64; 2], b: [f64; 2], r: f64) -> MarketParams {
        MarketParams::new(
            DVector::from_row_slice(&a),
            DVector::from_row_slice(&b),
            DMatrix::from_row_slice(2, 2, &[0.1, 0.1, 0.0, 0.1]),
            r,
            DVector::from_element(2, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn drift_example_at_ten() {
        let p = example_market();
        let mu = p.drift(&MarketState::initial(&p));
        // 0.5 − 0.2·ln 10 + ½·0.01
        assert_relative_eq!(mu[0], 0.0444829814, epsilon = 1e-10);
        assert_relative_eq!(mu[0], 0.5 - 0.2 * LN_10 + 0.005, epsilon = 1e-15);
    }

    #[test]
    fn drift_without_reversion_is_constant() {
        let p = independent_market(&[0.5], &[0.0], &[0.1], 0.03, &[10.0]).unwrap();
        for s in [0.01, 1.0, 10.0, 1e6] {
            let st = MarketState::from_prices(&p, 0.0, &DVector::from_element(1, s)).unwrap();
            assert_relative_eq!(p.drift(&st)[0], 0.505, epsilon = 1e-15);
        }
    }

    #[test]
    fn drift_bidiagonal_row_norms() {
        let p = bidiagonal2([0.0, 0.0], [0.0, 0.0], 0.0);
        let st = MarketState::new(&p, 0.0, DVector::from_vec(vec![3.0, -2.0])).unwrap();
        let mu = p.drift(&st);
        assert_relative_eq!(mu[0], 0.01, epsilon = 1e-15);
        assert_relative_eq!(mu[1], 0.005, epsilon = 1e-15);
    }

    #[test]
    fn excess_return_examples() {
        let p = example_market();
        let st = MarketState::initial(&p);
        assert_relative_eq!(p.excess_return(&st)[0], 0.0144829814, epsilon = 1e-10);

        let zero_rate = p.with_rate(0.0).unwrap();
        assert_eq!(zero_rate.excess_return(&st), zero_rate.drift(&st));

        // a chosen so that μ = r at the evaluated state.
        let x = 1.7;
        let r = 0.03;
        let a = r + 0.2 * x - 0.005;
        let q = independent_market(&[a], &[0.2], &[0.1], r, &[x.exp()]).unwrap();
        let c = q.excess_return(&MarketState::initial(&q));
        assert!(c[0].abs() < 1e-15);
    }

    #[test]
    fn transition_mean_example_market() {
        let p = example_market();
        let law = p.transition_law(&MarketState::initial(&p), 1.0).unwrap();
        let expected = (-0.2f64).exp() * LN_10 + 2.5 * (1.0 - (-0.2f64).exp());
        assert_relative_eq!(law.mean[0], 2.3383703445, epsilon = 1e-9);
        assert_relative_eq!(law.mean[0], expected, epsilon = 1e-14);
        assert_relative_eq!(law.cov[(0, 0)], 0.0082419988, epsilon = 1e-9);
    }

    #[test]
    fn transition_mean_matches_fine_euler_composition() {
        // Oracle: many tiny Euler steps of the mean ODE dx = (a − b x) dt.
        let p = example_market();
        let law = p.transition_law(&MarketState::initial(&p), 1.0).unwrap();
        let steps = 200_000;
        let h = 1.0 / steps as f64;
        let mut x = LN_10;
        for _ in 0..steps {
            x += (0.5 - 0.2 * x) * h;
        }
        assert!((law.mean[0] - x).abs() < 1e-6);
    }

    #[test]
    fn transition_without_reversion_is_brownian() {
        let p = bidiagonal2([0.3, -0.1], [0.0, 0.0], 0.0);
        let st = MarketState::new(&p, 0.0, DVector::from_vec(vec![1.0, 2.0])).unwrap();
        let law = p.transition_law(&st, 0.5).unwrap();
        assert_eq!(law.mean, DVector::from_vec(vec![1.0 + 0.15, 2.0 - 0.05]));
        assert_eq!(law.cov, p.cov_rate() * 0.5);
    }

    #[test]
    fn transition_long_horizon_is_stationary() {
        let p = bidiagonal2([0.1, 0.3], [0.5, 1.5], 0.0);
        let st = MarketState::new(&p, 0.0, DVector::from_vec(vec![5.0, -5.0])).unwrap();
        let law = p.transition_law(&st, 200.0).unwrap();
        let stat = p.stationary_mean_log().unwrap();
        assert_relative_eq!(law.mean, stat, epsilon = 1e-12);
        let r = p.cov_rate();
        for i in 0..2 {
            for j in 0..2 {
                let lim = r[(i, j)] / (p.b()[i] + p.b()[j]);
                assert_relative_eq!(law.cov[(i, j)], lim, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn transition_rejects_bad_dt() {
        let p = example_market();
        assert!(p.propagator(0.0).is_err());
        assert!(p.propagator(-1.0).is_err());
        assert!(p.propagator(f64::NAN).is_err());
    }

    #[test]
    fn sample_step_degenerate_cases() {
        let mean = DVector::from_vec(vec![1.0, 2.0]);
        let law = GaussianStep::new(mean.clone(), DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(
            law.sample(&DVector::from_vec(vec![3.0, -7.0])).unwrap(),
            mean
        );

        let p = bidiagonal2([0.1, 0.3], [0.5, 1.5], 0.0);
        let law = p.transition_law(&MarketState::initial(&p), 0.1).unwrap();
        assert_eq!(law.sample(&DVector::zeros(2)).unwrap(), law.mean);
        assert!(law.sample(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn sample_step_moments_example_market() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let p = example_market();
        let law = p.transition_law(&MarketState::initial(&p), 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let draws: std::vec::Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                law.sample(&DVector::from_element(1, z)).unwrap()[0]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let target_var = 0.01 * (1.0 - (-0.4f64).exp()) / 0.4;
        let se_mean = (target_var / n as f64).sqrt();
        // Var of the sample variance for a Gaussian is 2σ⁴/(n−1).
        let se_var = target_var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - 2.3383703445).abs() < 3.0 * se_mean);
        assert!((var - target_var).abs() < 3.0 * se_var);
    }

    #[test]
    fn stationary_mean() {
        assert_relative_eq!(
            example_market().stationary_mean_log().unwrap()[0],
            2.5,
            epsilon = 1e-15
        );
        let p = independent_market(&[0.0], &[0.7], &[0.1], 0.0, &[1.0]).unwrap();
        assert_eq!(p.stationary_mean_log().unwrap()[0], 0.0);
        let q = bidiagonal2([0.1, 0.1], [0.5, 0.0], 0.0);
        assert_eq!(
            q.stationary_mean_log(),
            Err(Error::NoStationaryDistribution { index: 1 })
        );
    }

    #[test]
    fn stationary_mean_matches_long_run_samples() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let p = independent_market(&[0.5], &[0.2], &[0.1], 0.0, &[1.0]).unwrap();
        let prop = p.propagator(1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        // Independent chains started at the stationary law's far tail, burned in.
        let chains = 4000;
        let mut sum = 0.0;
        for _ in 0..chains {
            let mut x = DVector::from_element(1, 0.0);
            for _ in 0..60 {
                let z: f64 = StandardNormal.sample(&mut rng);
                x = prop.mean(&x) + prop.shock(&DVector::from_element(1, z));
            }
            sum += x[0];
        }
        let mean = sum / chains as f64;
        let stat_sd = (0.01f64 / 0.4).sqrt();
        assert!((mean - 2.5).abs() < 3.0 * stat_sd / (chains as f64).sqrt());
    }

    #[test]
    fn rejects_invalid_params() {
        let ok = |b: f64, s0: f64| independent_market(&[0.1], &[b], &[0.1], 0.0, &[s0]);
        assert!(ok(-0.1, 1.0).is_err());
        assert!(ok(0.1, 0.0).is_err());
        assert!(ok(f64::NAN, 1.0).is_err());
        let mismatch = MarketParams::new(
            DVector::zeros(2),
            DVector::zeros(3),
            DMatrix::identity(2, 2),
            0.0,
            DVector::from_element(2, 1.0),
        );
        assert!(matches!(mismatch, Err(Error::Dimension { what: "b", .. })));
    }

    #[test]
    fn singular_sigma_is_flagged_not_rejected() {
        let p = MarketParams::new(
            DVector::zeros(2),
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.2, 0.4]),
            0.0,
            DVector::from_element(2, 1.0),
        )
        .unwrap();
        assert!(!p.is_complete());
        assert_eq!(p.sigma_rank(), 1);
    }

    #[test]
    fn state_bank_and_prices() {
        let p = example_market();
        let st = MarketState::new(&p, 2.0, DVector::from_element(1, 1.0)).unwrap();
        assert_relative_eq!(st.bank(), (0.06f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(st.prices()[0], core::f64::consts::E, epsilon = 1e-15);
        assert!(MarketState::new(&p, -1.0, DVector::zeros(1)).is_err());
        assert!(MarketState::new(&p, 0.0, DVector::zeros(2)).is_err());
    }

    fn params_strategy(n: usize) -> impl Strategy<Value = MarketParams> {
        (
            proptest::collection::vec(-1.0..1.0f64, n),
            proptest::collection::vec(prop_oneof![Just(0.0), 0.0..2.0f64], n),
            proptest::collection::vec(-0.5..0.5f64, n * n),
            -0.05..0.1f64,
        )
            .prop_map(move |(a, b, s, r)| {
                MarketParams::new(
                    DVector::from_vec(a),
                    DVector::from_vec(b),
                    DMatrix::from_row_slice(n, n, &s),
                    r,
                    DVector::from_element(n, 1.0),
                )
                .unwrap()
            })
    }

    proptest! {
        #[test]
        fn semigroup(
            p in (1usize..5).prop_flat_map(params_strategy),
            dt1 in 0.01..3.0f64,
            dt2 in 0.01..3.0f64,
            x0 in -2.0..2.0f64,
        ) {
            let n = p.n();
            let x = DVector::from_fn(n, |i, _| x0 + i as f64 * 0.3);
            let p1 = p.propagator(dt1).unwrap();
            let p2 = p.propagator(dt2).unwrap();
            let p12 = p.propagator(dt1 + dt2).unwrap();
            // Composition of Gaussian affine maps: mean D2(D1 x + m1) + m2, cov D2 C1 D2 + C2.
            let mean = p2.mean(&p1.mean(&x));
            let d2 = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| (-p.b()[i] * dt2).exp()));
            let cov = &d2 * p1.cov() * &d2 + p2.cov();
            let direct = p12.mean(&x);
            for i in 0..n {
                prop_assert!((mean[i] - direct[i]).abs() <= 1e-10 * direct[i].abs().max(1.0));
                for j in 0..n {
                    prop_assert!((cov[(i, j)] - p12.cov()[(i, j)]).abs() <= 1e-10);
                }
            }
        }

        #[test]
        fn euler_consistency(p in (1usize..5).prop_flat_map(params_strategy), x0 in -3.0..3.0f64) {
            let dt = 1e-4;
            let n = p.n();
            let x = DVector::from_fn(n, |i, _| x0 - i as f64 * 0.2);
            let exact = p.propagator(dt).unwrap();
            let euler = &x + (p.a() - p.b().component_mul(&x)) * dt;
            // Second-order remainder: ½ b (a − b x) dt² per coordinate.
            let gap = (exact.mean(&x) - euler).amax();
            let bound = 2.0 * (p.b().amax() * (p.a().amax() + p.b().amax() * x.amax()) + 1.0) * dt * dt;
            prop_assert!(gap <= bound, "gap {} bound {}", gap, bound);
            let cov_gap = (exact.cov() - p.cov_rate() * dt).amax();
            prop_assert!(cov_gap <= 4.0 * p.b().amax() * p.cov_rate().amax() * dt * dt + 1e-18);
        }

        #[test]
        fn drift_is_affine_with_slope_minus_b(
            p in (1usize..5).prop_flat_map(params_strategy),
            x0 in -3.0..3.0f64,
            h in 0.01..1.0f64,
        ) {
            let n = p.n();
            let x = DVector::from_element(n, x0);
            for i in 0..n {
                let mut xh = x.clone();
                xh[i] += h;
                let slope = (p.drift_at(&xh)[i] - p.drift_at(&x)[i]) / h;
                prop_assert!((slope + p.b()[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn excess_plus_rate_is_drift(p in (1usize..5).prop_flat_map(params_strategy), x0 in -3.0..3.0f64) {
            let x = DVector::from_element(p.n(), x0);
            let c = p.excess_return_at(&x);
            let mu = p.drift_at(&x);
            for i in 0..p.n() {
                // (μ − r) + r can differ from μ by one rounding.
                prop_assert!((c[i] + p.r() - mu[i]).abs() <= f64::EPSILON * (mu[i].abs() + p.r().abs()));
            }
        }
    }
}
