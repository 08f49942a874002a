//! Single-path simulation kernels.
//!
//! Asset log-prices always advance by the exact OU transition. Wealth is
//! advanced either by the discrete budget identity (holdings frozen over a
//! step, exactly self-financing, may go bankrupt) or by a log-Euler step of
//! `d log V = (r + fᵀc − ½fᵀRf) dt + fᵀσ dW` that stays positive. Both
//! schemes read the same asset shocks, so strategies compared at the same
//! noise stream are paired.
//!
//! Wealth is carried in units of the savings account (`Ṽ = V / B`), which
//! makes the all-cash strategy exact.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::kelly::{self, excess_growth, FractionVector};
use crate::market::{MarketParams, MarketState, OuPropagator};
use crate::{Error, Result};

/// Rule mapping the market state to portfolio fractions.
#[derive(Debug, Clone, PartialEq)]
pub enum StrategySpec {
    Kelly,
    ScaledKelly(f64),
    Fixed(DVector<f64>),
    Cash,
}

impl StrategySpec {
    pub fn validate(&self, params: &MarketParams) -> Result<()> {
        match self {
            StrategySpec::ScaledKelly(lambda) if !lambda.is_finite() => {
                Err(Error::invalid("lambda", "must be finite"))
            }
            StrategySpec::Fixed(f) => {
                Error::check_len("fixed fractions", params.n(), f.len())?;
                if f.iter().all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(Error::invalid("fixed fractions", "entries must be finite"))
                }
            }
            _ => Ok(()),
        }
    }

    pub fn fractions(&self, params: &MarketParams, state: &MarketState) -> FractionVector {
        self.fractions_from_excess(params, &params.excess_return(state))
    }

    pub fn fractions_from_excess(&self, params: &MarketParams, c: &DVector<f64>) -> FractionVector {
        match self {
            StrategySpec::Kelly => kelly::fraction_from_excess(params, c),
            StrategySpec::ScaledKelly(lambda) => {
                kelly::fraction_from_excess(params, c).scaled(*lambda)
            }
            StrategySpec::Fixed(f) => {
                FractionVector::new(f.clone()).expect("validated fixed fractions")
            }
            StrategySpec::Cash => FractionVector::zeros(params.n()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WealthScheme {
    BudgetIdentity,
    LogEuler,
}

/// Time grid, initial wealth and what to keep from one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPlan {
    horizon: f64,
    n_steps: usize,
    v0: f64,
    checkpoints: Vec<usize>,
    record: bool,
}

impl PathPlan {
    /// A plan whose only checkpoint is the terminal step.
    pub fn new(horizon: f64, n_steps: usize, v0: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid("horizon", "must be positive"));
        }
        if n_steps == 0 {
            return Err(Error::invalid("n_steps", "must be at least 1"));
        }
        if !(v0.is_finite() && v0 > 0.0) {
            return Err(Error::invalid("v0", "must be positive"));
        }
        Ok(PathPlan {
            horizon,
            n_steps,
            v0,
            checkpoints: alloc::vec![n_steps],
            record: false,
        })
    }

    /// Step indices (strictly increasing, at most `n_steps`) at which
    /// snapshots are taken.
    pub fn with_checkpoints(mut self, checkpoints: Vec<usize>) -> Result<Self> {
        if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("checkpoints", "must be strictly increasing"));
        }
        if checkpoints.last().is_some_and(|&k| k > self.n_steps) {
            return Err(Error::invalid("checkpoints", "beyond the last step"));
        }
        self.checkpoints = checkpoints;
        Ok(self)
    }

    /// Keep the full trajectory of this path.
    pub fn with_record(mut self, record: bool) -> Self {
        self.record = record;
        self
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn checkpoints(&self) -> &[usize] {
        &self.checkpoints
    }

    pub fn records(&self) -> bool {
        self.record
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Time of grid point `k`; exact at both ends.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            self.horizon * (k as f64 / self.n_steps as f64)
        }
    }

    /// Step index nearest to time `t`.
    pub fn step_at(&self, t: f64) -> usize {
        let k = libm::round(t / self.horizon * self.n_steps as f64);
        (k.max(0.0) as usize).min(self.n_steps)
    }

    fn propagator_matches(&self, prop: &OuPropagator) -> Result<()> {
        let dt = self.dt();
        if (prop.dt() - dt).abs() > 1e-12 * dt {
            return Err(Error::invalid("propagator", "dt differs from the plan"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub x: DVector<f64>,
    pub fractions: DVector<f64>,
    /// `None` once the path is bankrupt.
    pub log_wealth: Option<f64>,
}

/// Every grid point of one path, `n_steps + 1` entries per field.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub x: Vec<DVector<f64>>,
    pub fractions: Vec<DVector<f64>>,
    pub log_wealth: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    pub terminal_log_wealth: Option<f64>,
    pub bankrupt_step: Option<usize>,
    /// `Σ (fᵀc − ½fᵀRf) Δt` over the solvent steps; the model's predicted
    /// `log Ṽ_T − log Ṽ_0`.
    pub excess_growth_integral: f64,
    /// `Σ ½[Σ_i f_i(η_i² − C_ii) − ((fᵀη)² − fᵀCf)]` over the solvent steps,
    /// with `η` the asset shock and `C` its covariance. Each term has zero
    /// conditional mean; it is the leading part of the per-step difference
    /// between budget-identity and log-Euler log-wealth.
    pub quadratic_control: f64,
    /// Largest `|ΔṼ − φ·ΔS̃| / Ṽ` over the steps.
    pub max_residual: f64,
    /// Set if any step used pseudoinverse fractions.
    pub pseudo: bool,
    pub snapshots: Vec<Snapshot>,
    pub trajectory: Option<Trajectory>,
}

pub fn standard_normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn discounted(x: &DVector<f64>, rt: f64) -> DVector<f64> {
    x.map(|xi| libm::exp(xi - rt))
}

/// Budget-identity update in discounted units. Returns the new discounted
/// wealth and the self-financing residual.
fn budget_step(
    f: &FractionVector,
    wealth: f64,
    st: &DVector<f64>,
    st_next: &DVector<f64>,
) -> (f64, f64) {
    let units = f.as_vector().component_div(st) * wealth;
    let cash = f.cash_fraction() * wealth;
    let next = cash + units.dot(st_next);
    let residual = (next - wealth - units.dot(&(st_next - st))).abs() / wealth;
    (next, residual)
}

fn quadratic_control(f: &DVector<f64>, shock: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let diag: f64 = (0..f.len())
        .map(|i| f[i] * (shock[i] * shock[i] - cov[(i, i)]))
        .sum();
    let fe = f.dot(shock);
    0.5 * (diag - (fe * fe - (cov * f).dot(f)))
}

/// Simulates one path of the asset and of wealth under `strategy`.
pub fn simulate_path<R: Rng + ?Sized>(
    params: &MarketParams,
    prop: &OuPropagator,
    strategy: &StrategySpec,
    plan: &PathPlan,
    scheme: WealthScheme,
    rng: &mut R,
) -> Result<PathOutcome> {
    strategy.validate(params)?;
    plan.propagator_matches(prop)?;
    let n = params.n();
    let r = params.r();
    let dt = plan.dt();
    let mut x = params.s0().map(libm::log);
    let mut wealth = plan.v0;
    let mut log_wealth = libm::log(plan.v0);
    let mut alive = true;
    let mut out = PathOutcome {
        terminal_log_wealth: None,
        bankrupt_step: None,
        excess_growth_integral: 0.0,
        quadratic_control: 0.0,
        max_residual: 0.0,
        pseudo: false,
        snapshots: Vec::with_capacity(plan.checkpoints.len()),
        trajectory: plan.record.then(Trajectory::default),
    };
    let mut next_checkpoint = plan.checkpoints.iter().peekable();

    for k in 0..=plan.n_steps {
        let t = plan.time(k);
        let c = params.excess_return_at(&x);
        let f = strategy.fractions_from_excess(params, &c);
        out.pseudo |= f.is_pseudo();
        let logv = alive.then_some(log_wealth + r * t);
        if next_checkpoint.peek() == Some(&&k) {
            next_checkpoint.next();
            out.snapshots.push(Snapshot {
                step: k,
                x: x.clone(),
                fractions: f.as_vector().clone(),
                log_wealth: logv,
            });
        }
        if let Some(traj) = out.trajectory.as_mut() {
            traj.x.push(x.clone());
            traj.fractions.push(f.as_vector().clone());
            traj.log_wealth.push(logv);
        }
        if k == plan.n_steps {
            break;
        }

        let shock = prop.shock(&standard_normals(n, rng));
        let x_next = prop.mean(&x) + &shock;
        if alive {
            let drift = excess_growth(&c, params.cov_rate(), f.as_vector());
            out.excess_growth_integral += drift * dt;
            out.quadratic_control += quadratic_control(f.as_vector(), &shock, prop.cov());
            let st = discounted(&x, r * t);
            let st_next = discounted(&x_next, r * plan.time(k + 1));
            match scheme {
                WealthScheme::BudgetIdentity => {
                    let (next, residual) = budget_step(&f, wealth, &st, &st_next);
                    if !next.is_finite() {
                        return Err(Error::NonFinite { step: k + 1 });
                    }
                    out.max_residual = out.max_residual.max(residual);
                    if next <= 0.0 {
                        alive = false;
                        wealth = 0.0;
                        out.bankrupt_step = Some(k + 1);
                    } else if next != wealth {
                        wealth = next;
                        log_wealth = libm::log(next);
                    }
                }
                WealthScheme::LogEuler => {
                    log_wealth += drift * dt + f.as_vector().dot(&shock);
                    let next = libm::exp(log_wealth);
                    if !log_wealth.is_finite() {
                        return Err(Error::NonFinite { step: k + 1 });
                    }
                    let units = f.as_vector().component_div(&st) * wealth;
                    let residual = (next - wealth - units.dot(&(&st_next - &st))).abs() / wealth;
                    out.max_residual = out.max_residual.max(residual);
                    wealth = next;
                }
            }
        }
        x = x_next;
    }
    out.terminal_log_wealth = alive.then_some(log_wealth + r * plan.horizon);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensitySnapshot {
    pub step: usize,
    pub discounted_prices: DVector<f64>,
    pub log_density: f64,
}

/// One path under the martingale measure.
///
/// Log-prices move with drift `r − ½‖σ_i‖²` so discounted prices are
/// martingales; `log Z` accumulates `θᵀΔW̃ − ½‖θ‖²Δt` with `θ` taken at the
/// start of each step.
pub fn risk_neutral_path<R: Rng + ?Sized>(
    params: &MarketParams,
    plan: &PathPlan,
    rng: &mut R,
) -> Result<Vec<DensitySnapshot>> {
    if !params.is_complete() {
        return Err(Error::SingularVolatility {
            rank: params.sigma_rank(),
            n: params.n(),
        });
    }
    let n = params.n();
    let r = params.r();
    let dt = plan.dt();
    let sqrt_dt = libm::sqrt(dt);
    let drift = params.row_norms_sq().map(|s| (r - 0.5 * s) * dt);
    let mut x = params.s0().map(libm::log);
    let mut log_z = 0.0;
    let mut snaps = Vec::with_capacity(plan.checkpoints.len());
    let mut next_checkpoint = plan.checkpoints.iter().peekable();
    for k in 0..=plan.n_steps {
        if next_checkpoint.peek() == Some(&&k) {
            next_checkpoint.next();
            snaps.push(DensitySnapshot {
                step: k,
                discounted_prices: discounted(&x, r * plan.time(k)),
                log_density: log_z,
            });
        }
        if k == plan.n_steps {
            break;
        }
        let theta = kelly::theta_from_excess(params, &params.excess_return_at(&x))?;
        let dw = standard_normals(n, rng) * sqrt_dt;
        log_z += theta.dot(&dw) - 0.5 * theta.norm_squared() * dt;
        x += &drift + params.sigma() * &dw;
        if !log_z.is_finite() {
            return Err(Error::NonFinite { step: k + 1 });
        }
    }
    Ok(snaps)
}

/// Pathwise comparison of discrete Kelly wealth with the exponential form
/// `Ṽ*/V₀ = exp(∫θ·dW + ½∫‖θ‖²dt)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WealthIdentityOutcome {
    /// Max over steps of `|Ṽ_budget / (V₀ E) − 1|`.
    pub max_gap_budget: f64,
    /// Max over steps of `|Ṽ_logeuler / (V₀ E) − 1|`.
    pub max_gap_log_euler: f64,
    pub terminal_log_exponential: f64,
}

/// Runs the Kelly strategy under the physical measure and tracks the
/// exponential form from the same noise. The Brownian increment is recovered
/// from the exact asset shock as `ΔW = σ⁻¹ η`.
pub fn wealth_identity_path<R: Rng + ?Sized>(
    params: &MarketParams,
    prop: &OuPropagator,
    plan: &PathPlan,
    rng: &mut R,
) -> Result<WealthIdentityOutcome> {
    if !params.is_complete() {
        return Err(Error::SingularVolatility {
            rank: params.sigma_rank(),
            n: params.n(),
        });
    }
    plan.propagator_matches(prop)?;
    let n = params.n();
    let r = params.r();
    let dt = plan.dt();
    let mut x = params.s0().map(libm::log);
    let mut log_exp = 0.0;
    let mut log_euler = 0.0;
    let mut budget = 1.0;
    let mut out = WealthIdentityOutcome {
        max_gap_budget: 0.0,
        max_gap_log_euler: 0.0,
        terminal_log_exponential: 0.0,
    };
    for k in 0..plan.n_steps {
        let t = plan.time(k);
        let c = params.excess_return_at(&x);
        let theta = kelly::theta_from_excess(params, &c)?;
        let f = kelly::fraction_from_excess(params, &c);
        let shock = prop.shock(&standard_normals(n, rng));
        let dw = kelly::theta_from_excess(params, &shock)?;
        let x_next = prop.mean(&x) + &shock;

        log_exp += theta.dot(&dw) + 0.5 * theta.norm_squared() * dt;
        log_euler +=
            excess_growth(&c, params.cov_rate(), f.as_vector()) * dt + f.as_vector().dot(&shock);
        if budget > 0.0 {
            let st = discounted(&x, r * t);
            let st_next = discounted(&x_next, r * plan.time(k + 1));
            budget = budget_step(&f, budget, &st, &st_next).0.max(0.0);
        }
        if !(log_exp.is_finite() && log_euler.is_finite() && budget.is_finite()) {
            return Err(Error::NonFinite { step: k + 1 });
        }
        let reference = libm::exp(log_exp);
        out.max_gap_budget = out.max_gap_budget.max((budget / reference - 1.0).abs());
        out.max_gap_log_euler = out
            .max_gap_log_euler
            .max((libm::exp(log_euler - log_exp) - 1.0).abs());
        x = x_next;
    }
    out.terminal_log_exponential = log_exp;
    Ok(out)
}
