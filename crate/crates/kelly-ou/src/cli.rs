//! Command-line front end.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use kelly_ou_core::kelly;
use kelly_ou_core::wealth::{StrategySpec, WealthScheme};
use kelly_ou_core::{Error as ModelError, MarketParams};
use serde::Serialize;

use crate::config::LoadedConfig;
use crate::ensemble::{self, EnsembleSummary, SimSpec};
use crate::experiments::{self, ExperimentReport, ExampleSettings};
use crate::output::{self, Table};
use crate::stats::MeanEstimate;
use crate::{Error, Result};

pub const EXIT_ACCEPTANCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "kelly-ou",
    version,
    about = "Kelly-optimal portfolios for mean-reverting log-prices"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory. Falls back to the config's output_dir, then to
    /// $KELLY_OU_OUT, then to the current directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for path simulation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Kelly fractions, market price of risk and growth rate at the configured state.
    OptimalFraction,
    /// Simulate wealth paths under a strategy.
    Simulate,
    /// Long-run expected total fractions of the structured markets.
    StructureLimits,
    /// Scaled-Kelly strategies against Kelly.
    Dominance,
    /// Sensitivity of the fraction to drift and volatility errors.
    Sensitivity,
    /// Martingale checks under the risk-neutral measure.
    MartingaleCheck,
    /// The single-asset worked example.
    Example,
    /// Gross leverage against correlation.
    LeverageCorrelation,
    /// Convergence of the two wealth schemes under grid refinement.
    SchemeConvergence,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::OptimalFraction => "optimal_fraction",
            Command::Simulate => "simulate",
            Command::StructureLimits => "structure_limits",
            Command::Dominance => "dominance",
            Command::Sensitivity => "sensitivity",
            Command::MartingaleCheck => "martingale",
            Command::Example => "example",
            Command::LeverageCorrelation => "leverage_correlation",
            Command::SchemeConvergence => "scheme_convergence",
        }
    }
}

/// Runs the parsed command and returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    let config = match &cli.config {
        Some(path) => LoadedConfig::from_path(path, cli.seed)?,
        None => LoadedConfig::from_str("{}", cli.seed)?,
    };
    let out_dir = cli
        .out
        .clone()
        .or_else(|| config.config.output_dir.clone())
        .or_else(|| std::env::var_os("KELLY_OU_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let ctx = Context {
        config,
        out_dir,
        command: cli.command,
    };
    match cli.threads {
        Some(0) => Err(Error::config("--threads must be at least 1")),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?
            .install(|| ctx.dispatch()),
        None => ctx.dispatch(),
    }
}

struct Context {
    config: LoadedConfig,
    out_dir: PathBuf,
    command: Command,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'a str,
    config_hash: &'a str,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    passed: Option<bool>,
    #[serde(flatten)]
    body: &'a T,
}

impl Context {
    fn dispatch(&self) -> Result<i32> {
        let cfg = &self.config;
        let c = &cfg.config;
        let report = match self.command {
            Command::OptimalFraction => return self.optimal_fraction(),
            Command::Simulate => return self.simulate(),
            Command::StructureLimits => experiments::structure_limits_experiment(
                cfg.block(&c.structure_limits, "structure_limits")?,
                cfg.seed,
            )?,
            Command::Dominance => experiments::dominance_experiment(
                &self.market()?,
                cfg.block(&c.dominance, "dominance")?,
                cfg.seed,
            )?,
            Command::Sensitivity => experiments::sensitivity_experiment(
                &self.market()?,
                cfg.block(&c.sensitivity, "sensitivity")?.eps,
            )?,
            Command::MartingaleCheck => experiments::martingale_experiment(
                &self.market()?,
                cfg.block(&c.martingale, "martingale")?,
                cfg.seed,
            )?,
            Command::Example => {
                let default = ExampleSettings::default();
                experiments::example_experiment(cfg.seed, c.example.as_ref().unwrap_or(&default))?
            }
            Command::LeverageCorrelation => experiments::leverage_correlation_experiment(
                cfg.block(&c.leverage, "leverage")?,
                cfg.seed,
            )?,
            Command::SchemeConvergence => {
                let block = cfg.block(&c.scheme_convergence, "scheme_convergence")?;
                let market = self.market()?;
                let strategy = block.strategy.to_spec();
                strategy
                    .validate(&market)
                    .map_err(|e| Error::config(e.to_string()))?;
                experiments::scheme_convergence_experiment(
                    &market,
                    &strategy,
                    &block.settings(),
                    cfg.seed,
                )?
            }
        };
        self.emit_report(&report)
    }

    /// The configured market; rank-deficient volatility is refused unless the
    /// config allows pseudoinverse fractions.
    fn market(&self) -> Result<MarketParams> {
        let params = self.config.market()?;
        if !params.is_complete() && !self.config.config.allow_pseudoinverse {
            return Err(ModelError::SingularVolatility {
                rank: params.sigma_rank(),
                n: params.n(),
            }
            .into());
        }
        Ok(params)
    }

    fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }

    fn write_json<T: Serialize>(
        &self,
        file: &str,
        passed: Option<bool>,
        body: &T,
    ) -> Result<PathBuf> {
        let env = Envelope {
            command: self.command.name(),
            config_hash: &self.config.hash,
            seed: self.config.seed,
            passed,
            body,
        };
        let path = self.path(file);
        output::write_atomic(&path, &output::to_json(&env)?)?;
        Ok(path)
    }

    fn write_csv(&self, file: &str, table: &Table) -> Result<PathBuf> {
        let mut bytes = format!(
            "# config_hash={} seed={}\n",
            self.config.hash, self.config.seed
        )
        .into_bytes();
        bytes.extend(table.to_csv()?);
        let path = self.path(file);
        output::write_atomic(&path, &bytes)?;
        Ok(path)
    }

    fn emit_report(&self, report: &ExperimentReport) -> Result<i32> {
        let name = &report.name;
        let json = self.write_json(
            &format!("{name}_report.json"),
            Some(report.passed()),
            report,
        )?;
        let mut written = vec![json];
        if let Some(table) = &report.paths {
            written.push(self.write_csv(&format!("{name}_paths.csv"), table)?);
        }
        let mut stdout = std::io::stdout().lock();
        for rule in &report.rules {
            let tag = if rule.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(stdout, "{tag} {}: {}", rule.name, rule.description);
        }
        for path in &written {
            let _ = writeln!(stdout, "wrote {}", path.display());
        }
        if report.passed() {
            Ok(0)
        } else {
            for rule in report.failures() {
                eprintln!("failed rule {}: {}", rule.name, rule.description);
            }
            Ok(EXIT_ACCEPTANCE)
        }
    }

    fn optimal_fraction(&self) -> Result<i32> {
        let params = self.market()?;
        let state = self.config.state(&params)?;
        let f = kelly::kelly_fraction(&params, &state);
        let theta = if params.is_complete() {
            Some(kelly::market_price_of_risk(&params, &state)?.theta)
        } else {
            None
        };
        let body = FractionReport {
            t: state.t(),
            prices: state.prices().iter().copied().collect(),
            fractions: f.as_vector().iter().copied().collect(),
            theta: theta.as_ref().map(|t| t.iter().copied().collect()),
            sum: f.total(),
            gross: f.gross(),
            cash_fraction: f.cash_fraction(),
            growth_rate: kelly::growth_rate(&params, &state, &f),
            pseudoinverse: f.is_pseudo(),
        };
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{:>6} {:>25} {:>25}", "asset", "f", "theta");
        for (i, fi) in body.fractions.iter().enumerate() {
            let th = body
                .theta
                .as_ref()
                .map_or("-".to_owned(), |t| output::format_float(t[i]));
            let _ = writeln!(
                out,
                "{:>6} {:>25} {:>25}",
                i + 1,
                output::format_float(*fi),
                th
            );
        }
        for (label, v) in [
            ("sum_f", body.sum),
            ("gross", body.gross),
            ("cash", body.cash_fraction),
            ("growth", body.growth_rate),
        ] {
            let _ = writeln!(out, "{label:>6} {:>25}", output::format_float(v));
        }
        let path = self.write_json("optimal_fraction.json", None, &body)?;
        let _ = writeln!(out, "wrote {}", path.display());
        Ok(0)
    }

    fn simulate(&self) -> Result<i32> {
        let cfg = &self.config;
        let block = cfg.block(&cfg.config.simulate, "simulate")?;
        let params = self.market()?;
        let strategy = block.strategy.to_spec();
        strategy
            .validate(&params)
            .map_err(|e| Error::config(e.to_string()))?;
        let spec = SimSpec::new(block.horizon, block.n_steps, block.n_paths, cfg.seed)
            .v0(block.v0)
            .record_paths(block.record_paths);
        let scheme = WealthScheme::from(block.scheme);
        let ens =
            ensemble::simulate_with(&params, &strategy, &spec, scheme).map_err(|e| match e {
                Error::Model(ModelError::InvalidParameter { .. }) => Error::config(e.to_string()),
                other => other,
            })?;
        let n = params.n();
        let mut written = Vec::new();
        for (p, traj) in ens.recorded().enumerate() {
            let mut header = vec!["t".to_owned()];
            header.extend((1..=n).map(|i| format!("S_{i}")));
            header.extend((1..=n).map(|i| format!("f_{i}")));
            header.extend(["V".to_owned(), "logV".to_owned()]);
            let mut table = Table::new(header);
            for (k, t) in ens.times.iter().enumerate() {
                let mut row = vec![*t];
                row.extend(traj.x[k].iter().map(|x| x.exp()));
                row.extend(traj.fractions[k].iter().copied());
                match traj.log_wealth[k] {
                    Some(lw) => row.extend([lw.exp(), lw]),
                    None => row.extend([0.0, f64::NEG_INFINITY]),
                }
                table.push(row);
            }
            written.push(self.write_csv(&format!("path_{p}.csv"), &table)?);
        }
        let body = SimulateReport {
            strategy: strategy_label(&strategy),
            scheme: block.scheme,
            horizon: ens.horizon,
            n_steps: ens.n_steps,
            n_paths: ens.n_paths,
            v0: ens.v0,
            summary: ens.summary.clone(),
            growth_rate: ens.growth_rate(),
            growth_identity_gap: ens.growth_identity(),
        };
        written.push(self.write_json("summary.json", None, &body)?);
        let mut out = std::io::stdout().lock();
        let s = &body.summary;
        let _ = writeln!(
            out,
            "mean log V_T = {} (se {}), bankrupt {}/{}",
            output::format_float(s.terminal_log_wealth.mean),
            output::format_float(s.terminal_log_wealth.se),
            s.bankrupt_paths,
            ens.n_paths
        );
        for path in &written {
            let _ = writeln!(out, "wrote {}", path.display());
        }
        Ok(0)
    }
}

fn strategy_label(s: &StrategySpec) -> serde_json::Value {
    match s {
        StrategySpec::Kelly => "kelly".into(),
        StrategySpec::Cash => "cash".into(),
        StrategySpec::ScaledKelly(l) => serde_json::json!({ "scaled_kelly": l }),
        StrategySpec::Fixed(f) => serde_json::json!({ "fixed": f.iter().collect::<Vec<_>>() }),
    }
}

#[derive(Serialize)]
struct FractionReport {
    t: f64,
    prices: Vec<f64>,
    fractions: Vec<f64>,
    theta: Option<Vec<f64>>,
    sum: f64,
    gross: f64,
    cash_fraction: f64,
    growth_rate: f64,
    pseudoinverse: bool,
}

#[derive(Serialize)]
struct SimulateReport {
    strategy: serde_json::Value,
    scheme: experiments::SchemeName,
    horizon: f64,
    n_steps: usize,
    n_paths: usize,
    v0: f64,
    summary: EnsembleSummary,
    growth_rate: MeanEstimate,
    growth_identity_gap: MeanEstimate,
}

/// Parses `args`, runs, and reports errors on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
