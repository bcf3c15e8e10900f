use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TelemetryError;

/// Readings above `SANITY_FACTOR × TDP` are treated as corrupt.
pub const SANITY_FACTOR: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GpuClass {
    Desktop,
    Workstation,
}

/// Static board specification for one GPU model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuSpec {
    pub name: String,
    pub cuda_cores: u32,
    pub vram_gb: f64,
    pub core_clock_mhz: f64,
    pub boost_clock_mhz: f64,
    pub transistors_millions: f64,
    pub process_nm: f64,
    pub tdp_w: f64,
    pub max_temp_c: f64,
    pub fp_gflops: f64,
    pub class: GpuClass,
}

impl GpuSpec {
    pub fn validate(&self) -> Result<(), TelemetryError> {
        if self.name.trim().is_empty() {
            return Err(TelemetryError::InvalidSpec("empty name".into()));
        }
        if !(self.tdp_w > 0.0 && self.tdp_w.is_finite()) {
            return Err(TelemetryError::InvalidSpec(format!(
                "{}: tdp_w must be positive, got {}",
                self.name, self.tdp_w
            )));
        }
        if !(self.max_temp_c > 0.0 && self.max_temp_c.is_finite()) {
            return Err(TelemetryError::InvalidSpec(format!(
                "{}: max_temp_c must be positive, got {}",
                self.name, self.max_temp_c
            )));
        }
        Ok(())
    }

    /// Upper bound on a plausible board power reading.
    pub fn power_ceiling_w(&self) -> f64 {
        SANITY_FACTOR * self.tdp_w
    }

    pub fn gtx_1080ti() -> Self {
        GpuSpec {
            name: "1080Ti".into(),
            cuda_cores: 3584,
            vram_gb: 11.0,
            core_clock_mhz: 1481.0,
            boost_clock_mhz: 1600.0,
            transistors_millions: 11_800.0,
            process_nm: 16.0,
            tdp_w: 250.0,
            max_temp_c: 91.0,
            fp_gflops: 11_340.0,
            class: GpuClass::Desktop,
        }
    }

    pub fn tesla_p100() -> Self {
        GpuSpec {
            name: "P100".into(),
            cuda_cores: 3584,
            vram_gb: 16.0,
            core_clock_mhz: 1190.0,
            boost_clock_mhz: 1329.0,
            transistors_millions: 15_300.0,
            process_nm: 16.0,
            tdp_w: 250.0,
            max_temp_c: 85.0,
            fp_gflops: 10_609.0,
            class: GpuClass::Workstation,
        }
    }
}

/// GPU models known to the toolkit, keyed case-insensitively by name.
#[derive(Debug, Clone)]
pub struct GpuRegistry {
    specs: BTreeMap<String, GpuSpec>,
}

impl Default for GpuRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl GpuRegistry {
    pub fn builtin() -> Self {
        let mut specs = BTreeMap::new();
        for spec in [GpuSpec::gtx_1080ti(), GpuSpec::tesla_p100()] {
            specs.insert(spec.name.to_ascii_lowercase(), spec);
        }
        GpuRegistry { specs }
    }

    pub fn register(&mut self, spec: GpuSpec) -> Result<(), TelemetryError> {
        spec.validate()?;
        self.specs.insert(spec.name.to_ascii_lowercase(), spec);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&GpuSpec> {
        self.specs.get(&name.to_ascii_lowercase())
    }

    pub fn lookup(&self, name: &str) -> Result<&GpuSpec, TelemetryError> {
        self.get(name).ok_or_else(|| TelemetryError::UnknownGpu {
            name: name.to_string(),
            known: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.specs.values().map(|s| s.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}
