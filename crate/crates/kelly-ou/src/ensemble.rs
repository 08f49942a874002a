//! Seeded, parallel Monte Carlo ensembles.
//!
//! Every path draws its noise from its own ChaCha stream, selected by
//! `(seed, path index)`, so results do not depend on the number of worker
//! threads and different strategies run at the same seed see the same asset
//! paths. Reductions run sequentially in path order after the parallel map.

use kelly_ou_core::wealth::{
    self, DensitySnapshot, PathOutcome, PathPlan, StrategySpec, WealthIdentityOutcome, WealthScheme,
};
use kelly_ou_core::{DVector, MarketParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::stats::MeanEstimate;
use crate::Result;

/// Noise stream of one path.
pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Grid and sampling settings shared by all ensemble runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub horizon: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub v0: f64,
    /// Step indices with cross-path snapshots; the terminal step is always added.
    pub checkpoints: Vec<usize>,
    /// Keep full trajectories for the first this-many paths.
    pub record_paths: usize,
}

impl SimSpec {
    pub fn new(horizon: f64, n_steps: usize, n_paths: usize, seed: u64) -> Self {
        SimSpec {
            horizon,
            n_steps,
            n_paths,
            seed,
            v0: 1.0,
            checkpoints: Vec::new(),
            record_paths: 0,
        }
    }

    pub fn v0(mut self, v0: f64) -> Self {
        self.v0 = v0;
        self
    }

    pub fn checkpoints(mut self, steps: Vec<usize>) -> Self {
        self.checkpoints = steps;
        self
    }

    /// Checkpoints at the grid points nearest to the given times.
    pub fn checkpoint_times(mut self, times: &[f64]) -> Self {
        let n = self.n_steps as f64;
        self.checkpoints = times
            .iter()
            .map(|t| ((t / self.horizon * n).round().max(0.0) as usize).min(self.n_steps))
            .collect();
        self
    }

    pub fn record_paths(mut self, count: usize) -> Self {
        self.record_paths = count;
        self
    }

    fn normalized_checkpoints(&self) -> Vec<usize> {
        let mut steps = self.checkpoints.clone();
        steps.push(self.n_steps);
        steps.sort_unstable();
        steps.dedup();
        steps
    }

    pub fn plan(&self) -> Result<PathPlan> {
        if self.n_paths == 0 {
            return Err(kelly_ou_core::Error::InvalidParameter {
                name: "n_paths",
                reason: "must be at least 1",
            }
            .into());
        }
        Ok(PathPlan::new(self.horizon, self.n_steps, self.v0)?
            .with_checkpoints(self.normalized_checkpoints())?)
    }

    pub fn time(&self, step: usize) -> f64 {
        if step == self.n_steps {
            self.horizon
        } else {
            self.horizon * (step as f64 / self.n_steps as f64)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSummary {
    /// Terminal `log V` over the solvent paths.
    pub terminal_log_wealth: MeanEstimate,
    pub terminal_log_wealth_variance: f64,
    pub bankrupt_paths: usize,
    pub bankrupt_fraction: f64,
    pub max_self_financing_residual: f64,
    pub pseudo_fractions: bool,
}

/// Paths of one strategy over a common grid.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub horizon: f64,
    pub v0: f64,
    pub r: f64,
    pub times: Vec<f64>,
    pub scheme: WealthScheme,
    pub strategy: StrategySpec,
    pub checkpoints: Vec<usize>,
    pub paths: Vec<PathOutcome>,
    pub summary: EnsembleSummary,
}

impl PathEnsemble {
    /// Position of `step` among the checkpoints.
    pub fn checkpoint_index(&self, step: usize) -> Option<usize> {
        self.checkpoints.binary_search(&step).ok()
    }

    /// Cross-path mean of `value` at a checkpoint. Paths where `value`
    /// returns `None` are skipped.
    pub fn mean_at<F>(&self, step: usize, value: F) -> Option<MeanEstimate>
    where
        F: Fn(&wealth::Snapshot) -> Option<f64>,
    {
        let idx = self.checkpoint_index(step)?;
        Some(MeanEstimate::from_values(
            self.paths.iter().filter_map(|p| value(&p.snapshots[idx])),
        ))
    }

    /// Per-path gap between realised `log Ṽ_T − log Ṽ_0` and the integrated
    /// model drift, divided by `T`. Its mean is zero up to discretisation.
    pub fn growth_identity(&self) -> MeanEstimate {
        let base = self.v0.ln() + self.r * self.horizon;
        MeanEstimate::from_values(self.paths.iter().filter_map(|p| {
            p.terminal_log_wealth
                .map(|lw| (lw - base - p.excess_growth_integral) / self.horizon)
        }))
    }

    /// `(log V_T − log V₀)/T` over solvent paths.
    pub fn growth_rate(&self) -> MeanEstimate {
        self.summary
            .terminal_log_wealth
            .scaled(1.0 / self.horizon)
            .shifted(-self.v0.ln() / self.horizon)
    }

    pub fn recorded(&self) -> impl Iterator<Item = &wealth::Trajectory> {
        self.paths.iter().filter_map(|p| p.trajectory.as_ref())
    }
}

impl MeanEstimate {
    fn shifted(mut self, by: f64) -> Self {
        self.mean += by;
        self
    }
}

fn run_ensemble(
    params: &MarketParams,
    strategy: &StrategySpec,
    spec: &SimSpec,
    scheme: WealthScheme,
) -> Result<PathEnsemble> {
    strategy.validate(params)?;
    let plan = spec.plan()?;
    let recorded_plan = plan.clone().with_record(true);
    let prop = params.propagator(plan.dt())?;
    let paths = (0..spec.n_paths)
        .into_par_iter()
        .map(|i| {
            let plan = if i < spec.record_paths {
                &recorded_plan
            } else {
                &plan
            };
            let mut rng = path_rng(spec.seed, i as u64);
            wealth::simulate_path(params, &prop, strategy, plan, scheme, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let terminal = MeanEstimate::from_values(paths.iter().filter_map(|p| p.terminal_log_wealth));
    let bankrupt = paths.iter().filter(|p| p.bankrupt_step.is_some()).count();
    let summary = EnsembleSummary {
        terminal_log_wealth: terminal,
        terminal_log_wealth_variance: terminal.variance(),
        bankrupt_paths: bankrupt,
        bankrupt_fraction: bankrupt as f64 / spec.n_paths as f64,
        max_self_financing_residual: paths.iter().map(|p| p.max_residual).fold(0.0, f64::max),
        pseudo_fractions: paths.iter().any(|p| p.pseudo),
    };
    Ok(PathEnsemble {
        seed: spec.seed,
        n_paths: spec.n_paths,
        n_steps: spec.n_steps,
        horizon: spec.horizon,
        v0: spec.v0,
        r: params.r(),
        times: (0..=spec.n_steps).map(|k| plan.time(k)).collect(),
        scheme,
        strategy: strategy.clone(),
        checkpoints: plan.checkpoints().to_vec(),
        paths,
        summary,
    })
}

/// Simulates with the budget-identity wealth scheme.
pub fn simulate(
    params: &MarketParams,
    strategy: &StrategySpec,
    spec: &SimSpec,
) -> Result<PathEnsemble> {
    run_ensemble(params, strategy, spec, WealthScheme::BudgetIdentity)
}

/// Simulates with the log-Euler wealth scheme on the same asset noise.
pub fn simulate_log_euler(
    params: &MarketParams,
    strategy: &StrategySpec,
    spec: &SimSpec,
) -> Result<PathEnsemble> {
    run_ensemble(params, strategy, spec, WealthScheme::LogEuler)
}

pub fn simulate_with(
    params: &MarketParams,
    strategy: &StrategySpec,
    spec: &SimSpec,
    scheme: WealthScheme,
) -> Result<PathEnsemble> {
    run_ensemble(params, strategy, spec, scheme)
}

/// Largest relative self-financing residual `|ΔṼ − φ·ΔS̃| / Ṽ` over all
/// paths and steps, measured in units of the savings account.
pub fn self_financing_residual(ensemble: &PathEnsemble) -> f64 {
    ensemble.summary.max_self_financing_residual
}

/// Discounted asset prices at the checkpoints under the martingale measure.
#[derive(Debug, Clone)]
pub struct RiskNeutralEnsemble {
    pub seed: u64,
    pub n_paths: usize,
    pub horizon: f64,
    pub checkpoints: Vec<usize>,
    pub checkpoint_times: Vec<f64>,
    /// `[path][checkpoint]`.
    pub discounted_prices: Vec<Vec<DVector<f64>>>,
    pub initial_discounted_prices: DVector<f64>,
}

/// `log Z` per path at each checkpoint.
#[derive(Debug, Clone)]
pub struct DensityProcess {
    pub checkpoints: Vec<usize>,
    /// `[path][checkpoint]`.
    pub log_z: Vec<Vec<f64>>,
}

pub fn simulate_risk_neutral(
    params: &MarketParams,
    spec: &SimSpec,
) -> Result<(RiskNeutralEnsemble, DensityProcess)> {
    let plan = spec.plan()?;
    let runs: Vec<Vec<DensitySnapshot>> = (0..spec.n_paths)
        .into_par_iter()
        .map(|i| wealth::risk_neutral_path(params, &plan, &mut path_rng(spec.seed, i as u64)))
        .collect::<Result<_, _>>()?;
    let checkpoints = plan.checkpoints().to_vec();
    let mut prices = Vec::with_capacity(runs.len());
    let mut log_z = Vec::with_capacity(runs.len());
    for run in runs {
        let (p, z): (Vec<_>, Vec<_>) = run
            .into_iter()
            .map(|s| (s.discounted_prices, s.log_density))
            .unzip();
        prices.push(p);
        log_z.push(z);
    }
    Ok((
        RiskNeutralEnsemble {
            seed: spec.seed,
            n_paths: spec.n_paths,
            horizon: spec.horizon,
            checkpoint_times: checkpoints.iter().map(|&k| plan.time(k)).collect(),
            checkpoints: checkpoints.clone(),
            discounted_prices: prices,
            initial_discounted_prices: params.s0().clone(),
        },
        DensityProcess { checkpoints, log_z },
    ))
}

/// One row of the martingale battery.
#[derive(Debug, Clone, Serialize)]
pub struct MartingaleRow {
    pub t: f64,
    /// Mean discounted price per asset.
    pub discounted_price: Vec<MeanEstimate>,
    pub initial_discounted_price: Vec<f64>,
    pub density: MeanEstimate,
}

impl MartingaleRow {
    pub fn passes(&self, k_se: f64) -> bool {
        let prices_ok = self
            .discounted_price
            .iter()
            .zip(&self.initial_discounted_price)
            .all(|(m, &s0)| m.within(s0, k_se, 1e-12 * s0));
        prices_ok && self.density.within(1.0, k_se, 1e-12)
    }
}

pub fn martingale_battery(
    ens: &RiskNeutralEnsemble,
    density: &DensityProcess,
) -> Vec<MartingaleRow> {
    let n = ens.initial_discounted_prices.len();
    (0..ens.checkpoints.len())
        .map(|c| MartingaleRow {
            t: ens.checkpoint_times[c],
            discounted_price: (0..n)
                .map(|i| MeanEstimate::from_values(ens.discounted_prices.iter().map(|p| p[c][i])))
                .collect(),
            initial_discounted_price: ens.initial_discounted_prices.iter().copied().collect(),
            density: MeanEstimate::from_values(density.log_z.iter().map(|z| z[c].exp())),
        })
        .collect()
}

/// Pathwise agreement of discrete Kelly wealth with `exp(∫θ·dW + ½∫‖θ‖²)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct WealthIdentityReport {
    pub n_steps: usize,
    /// Max over paths and steps, budget-identity wealth.
    pub max_gap_budget: f64,
    /// Mean over paths of the per-path max gap, budget-identity wealth.
    pub mean_gap_budget: f64,
    /// Max over paths and steps, log-Euler wealth.
    pub max_gap_log_euler: f64,
}

pub fn optimal_discounted_wealth_check(
    params: &MarketParams,
    horizon: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<WealthIdentityReport> {
    let spec = SimSpec::new(horizon, n_steps, n_paths, seed);
    let plan = spec.plan()?;
    let prop = params.propagator(plan.dt())?;
    let outcomes: Vec<WealthIdentityOutcome> = (0..n_paths)
        .into_par_iter()
        .map(|i| wealth::wealth_identity_path(params, &prop, &plan, &mut path_rng(seed, i as u64)))
        .collect::<Result<_, _>>()?;
    Ok(WealthIdentityReport {
        n_steps,
        max_gap_budget: outcomes
            .iter()
            .map(|o| o.max_gap_budget)
            .fold(0.0, f64::max),
        mean_gap_budget: outcomes.iter().map(|o| o.max_gap_budget).sum::<f64>() / n_paths as f64,
        max_gap_log_euler: outcomes
            .iter()
            .map(|o| o.max_gap_log_euler)
            .fold(0.0, f64::max),
    })
}
