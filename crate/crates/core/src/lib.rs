//! Twin-experiment (OSSE) toolkit for multi-source flood data assimilation.
//!
//! The crate bundles a 2D shallow-water forward model, a stochastic ensemble
//! Kalman filter analysing friction, inflow and floodplain depth corrections,
//! and synthetic observation operators for river gauges, SAR-derived wet
//! surface ratios and wide-swath altimetry node heights.

pub mod case;
pub mod control;
pub mod enkf;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod obs;
pub mod osse;
pub mod rng;
pub mod selftest;
pub mod swe;

pub use error::{OsseError, Result};
