//! Forecasting engine for emergency-department census and acuity-stratified
//! arrivals.
//!
//! The crate is organised bottom-up:
//!
//! - [`event_store`]: encounter ingest, validation and time-range queries.
//! - [`timeseries`]: census and per-acuity arrival series on a 15-minute grid.
//! - [`features`]: the 54-column regressor row for a (tick, series) pair.
//! - [`glm`]: penalized Poisson regression (IRLS + coordinate descent).
//! - [`gbm`]: gradient-boosted regression trees.
//! - [`forecaster`]: datasets, the 12 x 6 training grid, baseline and metrics.
//! - [`simulator`]: synthetic encounter streams from a nonhomogeneous Poisson process.
//! - [`service`]: the live scoring loop, reconciliation, health monitoring and
//!   shift-action log.

pub mod config;
pub mod error;
pub mod event_store;
pub mod features;
pub mod forecaster;
pub mod gbm;
pub mod glm;
pub mod service;
pub mod simulator;
pub mod timeseries;
pub mod timefmt;

pub use error::{Error, Result};
