//! GPU power telemetry: dmon line parsing, board specs and sample sources.

mod dmon;
mod gpu;
mod source;

pub use dmon::{
    format_dmon_line, parse_dmon_line, validate_sample, ColumnLayout, PowerSample, DEFAULT_COLUMNS,
};
pub use gpu::{GpuClass, GpuRegistry, GpuSpec, SANITY_FACTOR};
pub use source::{
    read_source, Clock, SampleStream, SourceKind, SystemClock, TelemetrySource, TimestampOrigin,
};

use thiserror::Error;

/// Classification of a single rejected dmon line.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("malformed line: {reason}")]
    MalformedLine { reason: String },
    #[error("negative power reading {value} W")]
    NegativePower { value: f64 },
}

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("{}{source}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Parse {
        line: Option<usize>,
        #[source]
        source: ParseError,
    },
    #[error("power {power_w} W exceeds the {ceiling_w} W sanity ceiling for {gpu}")]
    PowerOutOfRange {
        power_w: f64,
        ceiling_w: f64,
        gpu: String,
    },
    #[error("{field} = {value} is outside [0, 100]")]
    UtilizationOutOfRange { field: &'static str, value: f64 },
    #[error("source {origin} unavailable: {reason}")]
    SourceUnavailable { origin: String, reason: String },
    #[error("invalid column layout: {0}")]
    InvalidLayout(String),
    #[error("nominal interval must be positive, got {0}")]
    InvalidInterval(f64),
    #[error("invalid GPU spec: {0}")]
    InvalidSpec(String),
    #[error("unknown GPU model {name:?} (known: {known})")]
    UnknownGpu { name: String, known: String },
}
