//! Online moment selection (OMS): adaptive allocation of a query budget
//! across heterogeneous data sources for GMM estimation of a scalar target.
//!
//! The setting: a scalar target `β* = f_tar(θ*)` is identified by `M` moment
//! conditions `E[ψ̃(O; θ*, η*)] = 0`, but no single data source reveals every
//! variable that the moment vector needs. Each of `|D|` queryable sources
//! returns i.i.d. samples of a variable subset, and a fixed binary mask
//! `m(d) ∈ {0,1}^M` says which moments a sample from source `d` can evaluate.
//! Querying source `s_t` at time `t` yields the augmented moment vector
//!
//! ```text
//! g_t(θ, η) = m(s_t) ⊙ ψ̃(O_t; θ, η),
//! ```
//!
//! and after `T` queries the target is estimated by two-step GMM over the
//! logged history. The asymptotic variance of the estimate depends on the
//! long-run fraction of queries sent to each source (a point `κ` on the
//! probability simplex), so data collection is a sequential decision problem:
//! policies estimate the variance-minimizing allocation `κ*` online and steer
//! the remaining budget toward it.
//!
//! The crate is organized around that pipeline:
//!
//! - [`model`]: moment models — the raw moment vector `ψ̃`, per-source masks,
//!   the parameter box `Θ`, the target map `f_tar`, and the influence-function
//!   building blocks (AIPW and frontdoor scores).
//! - [`sources`]: queryable scenarios — synthetic linear and random-Fourier-
//!   feature causal models with known truths, plus bootstrap replay over user
//!   CSV data.
//! - [`nuisance`]: sequentially fitted nuisance estimators (propensities,
//!   outcome regressions, discrete tables) with prequential snapshots.
//! - [`gmm`]: the two-step GMM estimator over logged histories.
//! - [`variance`]: the plug-in variance estimator and its off-policy
//!   reweighting to any candidate allocation `κ`.
//! - [`allocation`]: oracle-simplex estimation, feasible-set projection, and
//!   integer apportionment of fractional targets.
//! - [`policies`]: the data-collection policies (fixed, oracle, explore-then-
//!   commit, explore-then-greedy, ε-greedy, and cost-structured variants).
//! - [`inference`]: pointwise confidence intervals and time-uniform
//!   confidence sequences.
//! - [`harness`]: the Monte Carlo experiment runner behind the CLI.

pub mod allocation;
pub mod error;
pub mod gmm;
pub mod harness;
pub mod inference;
pub mod model;
pub mod nuisance;
pub mod policies;
pub mod rng;
pub mod sources;
pub mod variance;

pub use error::{Error, Result};
pub use model::{MomentModel, Sample, SelectionVector};
pub use sources::Scenario;
pub use variance::SimplexPoint;
