//! Kelly-optimal investing in markets whose log-prices follow a multivariate
//! Ornstein-Uhlenbeck process.
//!
//! This crate is `no_std` (it needs `alloc`). It holds the pure algorithms:
//!
//! - [`market`]: market parameters and state, drift and excess return, and the
//!   exact Gaussian transition law of the log-price vector.
//! - [`kelly`]: market price of risk, Kelly fractions `R⁻¹c` (with a
//!   pseudoinverse fallback), replicating holdings and the mean-variance
//!   objective whose maximiser is the Kelly vector.
//! - [`structure`]: the bidiagonal and lower-triangular volatility structures
//!   and their closed-form expected total fractions.
//! - [`wealth`]: single-path kernels for self-financing wealth, risk-neutral
//!   density and the optimal-wealth identity.
//!
//! Ensembles, IO and the command line live in the `kelly-ou` crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

mod error;
pub mod kelly;
pub mod linalg;
pub mod market;
pub mod structure;
pub mod wealth;

pub use error::{Error, Result};
pub use kelly::{FractionVector, Holdings, RiskPremium};
pub use market::{GaussianStep, MarketParams, MarketState, OuPropagator};
pub use structure::StructureKind;
pub use wealth::{PathPlan, StrategySpec, WealthScheme};

pub use nalgebra::{DMatrix, DVector};
