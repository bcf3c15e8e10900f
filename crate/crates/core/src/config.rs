//! Optional `config.toml` in the store root.
//!
//! ```toml
//! pue = 1.59
//! columns = "gpu,pwr,gtemp,mtemp,sm,mem,enc,dec,mclk,pclk"
//!
//! [monitor]
//! command = "nvidia-smi dmon -d {interval}"
//!
//! [intensity.IE]
//! mean = 229.8718
//! std = 77.4026
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::carbon::{CarbonError, CarbonIntensity, IntensityRegistry, DEFAULT_PUE};
use crate::telemetry::{ColumnLayout, GpuRegistry, GpuSpec, TelemetryError};

pub const DEFAULT_MONITOR_COMMAND: &str = "nvidia-smi dmon -d {interval}";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{path}: {reason}")]
    Syntax { path: String, reason: String },
    #[error(transparent)]
    Carbon(#[from] CarbonError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    pub command: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityEntry {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub pue: Option<f64>,
    pub columns: Option<String>,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default)]
    pub intensity: BTreeMap<String, IntensityEntry>,
    #[serde(default)]
    pub gpu: BTreeMap<String, GpuSpec>,
}

impl Config {
    /// A missing file is an empty configuration.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::parse(&text).map_err(|reason| ConfigError::Syntax {
                path: path.display().to_string(),
                reason,
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Config::default()),
            Err(e) => Err(ConfigError::Io {
                path: path.display().to_string(),
                reason: e.to_string(),
            }),
        }
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn pue(&self) -> f64 {
        self.pue.unwrap_or(DEFAULT_PUE)
    }

    pub fn layout(&self) -> Result<ColumnLayout, ConfigError> {
        match &self.columns {
            Some(spec) => Ok(ColumnLayout::parse(spec)?),
            None => Ok(ColumnLayout::default()),
        }
    }

    /// The sampler command line with `{interval}` substituted.
    pub fn monitor_command(&self, interval_s: f64) -> String {
        self.monitor
            .command
            .as_deref()
            .unwrap_or(DEFAULT_MONITOR_COMMAND)
            .replace("{interval}", &interval_s.to_string())
    }

    /// Built-in regions with configured overrides applied.
    pub fn intensities(&self) -> Result<IntensityRegistry, ConfigError> {
        let mut reg = IntensityRegistry::builtin();
        for (code, e) in &self.intensity {
            reg.register(CarbonIntensity::new(code, e.mean, e.std, "config.toml")?);
        }
        Ok(reg)
    }

    pub fn gpus(&self) -> Result<GpuRegistry, ConfigError> {
        let mut reg = GpuRegistry::builtin();
        for spec in self.gpu.values() {
            reg.register(spec.clone())?;
        }
        Ok(reg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let c = Config::parse("").unwrap();
        assert_eq!(c.pue(), DEFAULT_PUE);
        assert_eq!(c.monitor_command(1.0), "nvidia-smi dmon -d 1");
        assert_eq!(c.intensities().unwrap().codes(), vec!["IE", "NL"]);
    }

    #[test]
    fn overrides_and_new_regions() {
        let c = Config::parse(
            "pue = 1.2\ncolumns = \"ts,gpu,pwr\"\n[monitor]\ncommand = \"sampler -i {interval}\"\n\
             [intensity.ie]\nmean = 300.0\nstd = 10.0\n[intensity.DE]\nmean = 350.0\nstd = 40.0\n",
        )
        .unwrap();
        assert_eq!(c.pue(), 1.2);
        assert!(c.layout().unwrap().has_timestamp());
        assert_eq!(c.monitor_command(5.0), "sampler -i 5");
        let reg = c.intensities().unwrap();
        assert_eq!(reg.lookup("IE").unwrap().mean_g_per_kwh, 300.0);
        assert_eq!(reg.lookup("de").unwrap().std_g_per_kwh, 40.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::parse("pue = 1.5\ncolor = true\n").is_err());
    }

    #[test]
    fn missing_file_is_default() {
        let dir = tempfile::tempdir().unwrap();
        let c = Config::load(&dir.path().join("config.toml")).unwrap();
        assert!(c.pue.is_none());
    }
}
