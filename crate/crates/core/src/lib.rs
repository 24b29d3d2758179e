//! Rate-induced tipping of a ramped saddle-node system under additive noise.
//!
//! The crate is organised by stage of the analysis:
//!
//! * [`model`]: closed-form model functions, invariant manifolds and the
//!   critical ramp speed.
//! * [`fokker_planck`]: density evolution with absorbing boundaries, escape
//!   probabilities and threshold-crossing rates.
//! * [`indicators`]: lag-1 autocorrelation, variance and decay-rate series
//!   from the density evolution.
//! * [`sde_mc`]: Euler–Maruyama ensembles, used as an independent check of
//!   the density-based results.
//! * [`bvp_path`]: collocation solver for the most likely escape path.
//! * [`continuation`]: parameter continuation of escape paths and the
//!   `(ε, D)` sweeps.
//! * [`config`] and [`io`]: run configuration and CSV tables.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bvp_path;
pub mod config;
pub mod continuation;
pub mod fokker_planck;
pub mod indicators;
pub mod io;
pub mod linalg;
pub mod model;
pub mod ode;
pub mod sde_mc;
