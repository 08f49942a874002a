//! JSON run configuration.
//!
//! Unknown keys are rejected everywhere. The seed is mandatory; it may come
//! from the file or from the command line, never from the clock.

use std::path::{Path, PathBuf};

use kelly_ou_core::structure::{self, StructureKind};
use kelly_ou_core::wealth::StrategySpec;
use kelly_ou_core::{DMatrix, DVector, MarketParams, MarketState};
use serde::{Deserialize, Serialize};

use crate::experiments::{
    DominanceSettings, ExampleSettings, LeverageSettings, MartingaleSettings,
    SchemeConvergenceSettings, SchemeName, StructureLimitsSettings, StructureName,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub market: Option<MarketConfig>,
    #[serde(default)]
    pub state: Option<StateConfig>,
    #[serde(default)]
    pub allow_pseudoinverse: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub structure_limits: Option<StructureLimitsSettings>,
    #[serde(default)]
    pub dominance: Option<DominanceSettings>,
    #[serde(default)]
    pub sensitivity: Option<SensitivityConfig>,
    #[serde(default)]
    pub martingale: Option<MartingaleSettings>,
    #[serde(default)]
    pub example: Option<ExampleSettings>,
    #[serde(default)]
    pub leverage: Option<LeverageSettings>,
    #[serde(default)]
    pub scheme_convergence: Option<SchemeConvergenceBlock>,
}

/// A scalar applied to every asset, or one value per asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerAsset {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl PerAsset {
    fn resolve(&self, name: &str, n: usize) -> Result<DVector<f64>> {
        match self {
            PerAsset::Scalar(v) => Ok(DVector::from_element(n, *v)),
            PerAsset::Vector(v) if v.len() == n => Ok(DVector::from_column_slice(v)),
            PerAsset::Vector(v) => Err(Error::config(format!(
                "market.{name} has {} entries, expected {n}",
                v.len()
            ))),
        }
    }
}

fn one() -> PerAsset {
    PerAsset::Scalar(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub a: PerAsset,
    pub b: PerAsset,
    pub r: f64,
    #[serde(default = "one")]
    pub s0: PerAsset,
    /// Explicit volatility matrix, row-major.
    #[serde(default)]
    pub sigma: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub structure: Option<StructureConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureConfig {
    pub kind: StructureName,
    pub n: usize,
    pub sigma: f64,
}

impl MarketConfig {
    pub fn sigma_matrix(&self) -> Result<DMatrix<f64>> {
        match (&self.sigma, &self.structure) {
            (Some(rows), None) => {
                let n = rows.len();
                if n == 0 || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::config(
                        "market.sigma must be a non-empty square matrix",
                    ));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
            (None, Some(s)) => {
                let kind = match s.kind {
                    StructureName::Bidiagonal => StructureKind::Bidiagonal {
                        n: s.n,
                        sigma: s.sigma,
                    },
                    StructureName::Triangular => StructureKind::Triangular {
                        n: s.n,
                        sigma: s.sigma,
                    },
                };
                structure::build_sigma(kind)
                    .map_err(|e| Error::config(format!("market.structure: {e}")))
            }
            _ => Err(Error::config(
                "market needs exactly one of sigma or structure",
            )),
        }
    }

    pub fn build(&self) -> Result<MarketParams> {
        let sigma = self.sigma_matrix()?;
        let n = sigma.nrows();
        let params = MarketParams::new(
            self.a.resolve("a", n)?,
            self.b.resolve("b", n)?,
            sigma,
            self.r,
            self.s0.resolve("s0", n)?,
        );
        // Shape and range problems are configuration errors; numerical
        // failures keep their own exit code.
        params.map_err(|e| match e {
            kelly_ou_core::Error::InvalidParameter { .. }
            | kelly_ou_core::Error::Dimension { .. } => Error::config(format!("market: {e}")),
            other => other.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateConfig {
    #[serde(default)]
    pub t: f64,
    pub prices: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyConfig {
    Kelly,
    ScaledKelly(f64),
    Fixed(Vec<f64>),
    Cash,
}

impl StrategyConfig {
    pub fn to_spec(&self) -> StrategySpec {
        match self {
            StrategyConfig::Kelly => StrategySpec::Kelly,
            StrategyConfig::ScaledKelly(l) => StrategySpec::ScaledKelly(*l),
            StrategyConfig::Fixed(f) => StrategySpec::Fixed(DVector::from_column_slice(f)),
            StrategyConfig::Cash => StrategySpec::Cash,
        }
    }
}

fn kelly() -> StrategyConfig {
    StrategyConfig::Kelly
}

fn unit() -> f64 {
    1.0
}

fn one_path() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default = "kelly")]
    pub strategy: StrategyConfig,
    pub horizon: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    #[serde(default = "unit")]
    pub v0: f64,
    /// Number of paths written out in full.
    #[serde(default = "one_path")]
    pub record_paths: usize,
    #[serde(default)]
    pub scheme: SchemeName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConvergenceBlock {
    #[serde(default = "kelly")]
    pub strategy: StrategyConfig,
    pub horizon: f64,
    pub base_steps: usize,
    #[serde(default = "three")]
    pub doublings: usize,
    #[serde(default = "ten_thousand")]
    pub n_paths: usize,
}

fn three() -> usize {
    3
}

fn ten_thousand() -> usize {
    10_000
}

impl SchemeConvergenceBlock {
    pub fn settings(&self) -> SchemeConvergenceSettings {
        SchemeConvergenceSettings {
            horizon: self.horizon,
            base_steps: self.base_steps,
            doublings: self.doublings,
            n_paths: self.n_paths,
        }
    }
}

/// A parsed config with the seed resolved.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub seed: u64,
    /// Hash of the config with the resolved seed and without `output_dir`.
    pub hash: String,
}

impl LoadedConfig {
    pub fn from_str(text: &str, seed_override: Option<u64>) -> Result<Self> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid JSON: {e}")))?;
        let config: RunConfig = serde_json::from_value(value.clone())
            .map_err(|e| Error::config(format!("invalid config: {e}")))?;
        let seed = seed_override
            .or(config.seed)
            .ok_or_else(|| Error::config("seed is required (in the config or via --seed)"))?;
        if let Some(obj) = value.as_object_mut() {
            obj.insert("seed".into(), seed.into());
            obj.remove("output_dir");
        }
        let config = RunConfig {
            seed: Some(seed),
            ..config
        };
        Ok(LoadedConfig {
            hash: crate::output::config_hash(&value),
            config,
            seed,
        })
    }

    pub fn from_path(path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str(&text, seed_override)
    }

    pub fn market(&self) -> Result<MarketParams> {
        self.config
            .market
            .as_ref()
            .ok_or_else(|| Error::config("this command needs a market block"))?
            .build()
    }

    pub fn state(&self, params: &MarketParams) -> Result<MarketState> {
        match &self.config.state {
            None => Ok(MarketState::initial(params)),
            Some(s) => {
                if s.prices.len() != params.n() {
                    return Err(Error::config(format!(
                        "state.prices has {} entries, expected {}",
                        s.prices.len(),
                        params.n()
                    )));
                }
                MarketState::from_prices(params, s.t, &DVector::from_column_slice(&s.prices))
                    .map_err(|e| Error::config(format!("state: {e}")))
            }
        }
    }

    pub fn block<'a, T>(&self, block: &'a Option<T>, name: &str) -> Result<&'a T> {
        block
            .as_ref()
            .ok_or_else(|| Error::config(format!("this command needs a {name} block")))
    }
}
