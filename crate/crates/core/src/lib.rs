//! Energy and carbon accounting for GPU training and inference runs.
//!
//! The pipeline runs from raw `nvidia-smi dmon` style telemetry
//! ([`telemetry`]) through per-second energy integration ([`timeseries`]) to
//! CO2-equivalent estimates with uncertainty ([`carbon`]), comparative
//! analyses ([`analytics`]), a record store ([`store`]) and rendered reports
//! ([`report`]).

pub mod analytics;
pub mod carbon;
pub mod cli;
pub mod config;
pub mod numfmt;
pub mod report;
pub mod store;
pub mod telemetry;
pub mod timeseries;
