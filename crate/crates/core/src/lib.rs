//! Temporal low-rank zeroth-order (ZO) optimization.
//!
//! The crate estimates gradients from two function evaluations along a
//! random perturbation `Z` and never stores `Z`: every perturbation is
//! regenerated from a per-iteration seed. Three perturbation families are
//! provided:
//!
//! - dense Gaussian `Z` (the MeZO family),
//! - per-step low-rank factors `Z = U Vᵀ` / `Z = U Σ Vᵀ` (LOZO / SubZO baselines),
//! - the temporal CPD form `Z_t = Σ_s τ_s (u_s ∘ v_s)` with `u_s`, `v_s`
//!   fixed for the run and only `τ ∈ R^r` drawn per step (TeZO).
//!
//! Because the model-dimension factors do not change over time, momentum and
//! the separable Adam second moment can be accumulated on `τ` alone, so
//! optimizer state per layer is `O(r)` instead of `O(mn)`.
//!
//! Module map:
//!
//! - [`rng`]: seed schedules and replayable Gaussian streams
//! - [`lowrank`]: factor sets, in-place CPD perturbation, element accounting
//! - [`estimators`]: the SPSA coefficient and the perturbation engine
//! - [`optimizers`]: TeZO / TeZO-m / TeZO-Adam, MeZO family, training loop
//! - [`rank`]: Jacobi SVD and layer-wise rank selection
//! - [`objectives`]: quadratics, a cubic test function, a cascade MLP
//! - [`verify`]: Monte Carlo checks of the estimator statistics
//! - [`config`], [`report`]: run configuration and CSV/JSON reports

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod estimators;
pub mod lowrank;
pub mod matrix;
pub mod objectives;
pub mod optimizers;
pub mod params;
pub mod rank;
pub mod report;
pub mod rng;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use params::{ModelParams, Param, ParamKind};
