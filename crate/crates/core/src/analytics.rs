//! Run records and the derived analyses: consistency audit, break-even
//! horizon, annualized emissions and appliance comparison.

use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::carbon::{co2_emissions, CarbonContext, CarbonError, EmissionEstimate};
use crate::numfmt::fixed;
use crate::telemetry::GpuRegistry;

pub const HOURS_PER_YEAR: f64 = 8760.0;

pub const DEFAULT_CONSISTENCY_THRESHOLD: f64 = 0.05;

/// Device draws above this are left out of power comparison charts.
pub const DEFAULT_COMPARISON_CEILING_W: f64 = 1200.0;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("invalid record {id:?}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("record {0:?} reports zero energy")]
    ZeroEnergy(String),
    #[error("no crossover: {0}")]
    NoCrossover(String),
    #[error("utilization {0} is outside [0, 1]")]
    UtilizationOutOfRange(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("device list is empty")]
    EmptyDeviceList,
    #[error("device file: {0}")]
    DeviceFile(String),
    #[error(transparent)]
    Carbon(#[from] CarbonError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Architecture {
    Lstm,
    Trans,
    Other(String),
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Lstm => f.write_str("LSTM"),
            Architecture::Trans => f.write_str("TRANS"),
            Architecture::Other(name) => f.write_str(name),
        }
    }
}

impl FromStr for Architecture {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "LSTM" => Architecture::Lstm,
            "TRANS" | "TRANSFORMER" => Architecture::Trans,
            _ => Architecture::Other(s.to_string()),
        })
    }
}

impl Serialize for Architecture {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Architecture {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().expect("infallible"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Train,
    Translate,
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Phase::Train),
            "translate" | "translation" => Ok(Phase::Translate),
            _ => Err(format!("unknown phase {s:?} (expected Train or Translate)")),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "Train",
            Phase::Translate => "Translate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Precision {
    FP32,
    INT16,
    INT8,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "FP32" => Ok(Precision::FP32),
            "INT16" => Ok(Precision::INT16),
            "INT8" => Ok(Precision::INT8),
            _ => Err(format!("unknown precision {s:?} (expected FP32, INT16 or INT8)")),
        }
    }
}

/// One measured run: a training job or a translation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub label: String,
    pub architecture: Architecture,
    pub lang_pair: String,
    pub phase: Phase,
    pub precision: Precision,
    pub gpu_model: String,
    pub n_gpus: u32,
    pub elapsed_h: f64,
    pub kwh: f64,
    pub avg_power_w: f64,
    pub region: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<String>,
}

impl RunRecord {
    pub fn validate(&self, gpus: &GpuRegistry) -> Result<(), AnalyticsError> {
        let bad = |reason: String| AnalyticsError::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        if self.id.trim().is_empty() {
            return Err(bad("empty id".into()));
        }
        if !(self.elapsed_h > 0.0 && self.elapsed_h.is_finite()) {
            return Err(bad(format!("elapsed_h must be positive, got {}", self.elapsed_h)));
        }
        if self.n_gpus == 0 {
            return Err(bad("n_gpus must be at least 1".into()));
        }
        if !(self.kwh >= 0.0 && self.kwh.is_finite()) {
            return Err(bad(format!("kwh must be non-negative, got {}", self.kwh)));
        }
        if !(self.avg_power_w > 0.0 && self.avg_power_w.is_finite()) {
            return Err(bad(format!("avg_power_w must be positive, got {}", self.avg_power_w)));
        }
        if self.region.trim().is_empty() {
            return Err(bad("empty region".into()));
        }
        if let Some(spec) = gpus.get(&self.gpu_model) {
            let limit = self.n_gpus as f64 * spec.tdp_w * self.elapsed_h / 1000.0;
            if self.kwh > limit {
                return Err(bad(format!(
                    "kwh {} exceeds the board limit {limit:.3} kWh",
                    self.kwh
                )));
            }
        }
        Ok(())
    }

    /// Whole-workstation draw implied by the energy total, in watts.
    pub fn workstation_power_w(&self) -> f64 {
        self.kwh / self.elapsed_h * 1000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Audit {
    Pass,
    Warn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Consistency {
    pub relative_error: f64,
    pub implied_kwh: f64,
    pub status: Audit,
}

/// Compares the reported energy with `avg_power_w × n_gpus × elapsed_h`.
pub fn consistency_check(record: &RunRecord, threshold: f64) -> Result<Consistency, AnalyticsError> {
    if record.kwh == 0.0 {
        return Err(AnalyticsError::ZeroEnergy(record.id.clone()));
    }
    let implied_kwh = record.avg_power_w * record.n_gpus as f64 * record.elapsed_h / 1000.0;
    let relative_error = (record.kwh - implied_kwh).abs() / record.kwh;
    Ok(Consistency {
        relative_error,
        implied_kwh,
        status: if relative_error > threshold {
            Audit::Warn
        } else {
            Audit::Pass
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BreakEvenResult {
    pub hours: f64,
    pub days: f64,
    pub assumption_note: String,
}

impl fmt::Display for BreakEvenResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} h ({} days)", fixed(self.hours, 1), fixed(self.days, 1))
    }
}

/// Operating time after which system A, costlier to train but cheaper to
/// run, has used no more cumulative energy than system B. Both systems are
/// assumed to run continuously at their average inference draw.
pub fn break_even(
    train_a_kwh: f64,
    infer_power_a_w: f64,
    train_b_kwh: f64,
    infer_power_b_w: f64,
) -> Result<BreakEvenResult, AnalyticsError> {
    for (name, v) in [
        ("train_a_kwh", train_a_kwh),
        ("infer_power_a_w", infer_power_a_w),
        ("train_b_kwh", train_b_kwh),
        ("infer_power_b_w", infer_power_b_w),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(AnalyticsError::InvalidInput(format!("{name} must be non-negative, got {v}")));
        }
    }
    if train_a_kwh < train_b_kwh {
        return Err(AnalyticsError::NoCrossover(
            "A is cheaper to train; swap the systems".into(),
        ));
    }
    if infer_power_a_w >= infer_power_b_w {
        return Err(AnalyticsError::NoCrossover(
            "the system that is cheaper to train is not more expensive to run".into(),
        ));
    }
    let hours = (train_a_kwh - train_b_kwh) * 1000.0 / (infer_power_b_w - infer_power_a_w);
    Ok(BreakEvenResult {
        hours,
        days: hours / 24.0,
        assumption_note: "continuous operation at each system's average inference draw; \
                          not normalized by throughput"
            .into(),
    })
}

/// Throughput-normalized variant: the number of inference workloads (for
/// example full test-set translations) after which A's cumulative energy
/// drops to B's.
pub fn break_even_workloads(
    train_a_kwh: f64,
    workload_kwh_a: f64,
    train_b_kwh: f64,
    workload_kwh_b: f64,
) -> Result<f64, AnalyticsError> {
    if train_a_kwh < train_b_kwh {
        return Err(AnalyticsError::NoCrossover(
            "A is cheaper to train; swap the systems".into(),
        ));
    }
    if workload_kwh_a >= workload_kwh_b {
        return Err(AnalyticsError::NoCrossover(
            "A does not use less energy per workload".into(),
        ));
    }
    Ok((train_a_kwh - train_b_kwh) / (workload_kwh_b - workload_kwh_a))
}

/// How much of the year a device is switched on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Usage {
    Utilization(f64),
    AnnualHours(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub name: String,
    pub power_w: f64,
    pub usage: Usage,
}

impl DeviceProfile {
    pub fn new(name: impl Into<String>, power_w: f64, usage: Usage) -> Result<Self, AnalyticsError> {
        let name = name.into();
        if !(power_w > 0.0 && power_w.is_finite()) {
            return Err(AnalyticsError::InvalidInput(format!(
                "device {name:?}: power must be positive, got {power_w}"
            )));
        }
        match usage {
            Usage::Utilization(u) if !(0.0..=1.0).contains(&u) => {
                return Err(AnalyticsError::UtilizationOutOfRange(u))
            }
            Usage::AnnualHours(h) if !(0.0..=HOURS_PER_YEAR).contains(&h) => {
                return Err(AnalyticsError::InvalidInput(format!(
                    "device {name:?}: annual hours must lie in [0, 8760], got {h}"
                )))
            }
            _ => {}
        }
        Ok(DeviceProfile { name, power_w, usage })
    }

    pub fn utilization(&self) -> f64 {
        match self.usage {
            Usage::Utilization(u) => u,
            Usage::AnnualHours(h) => h / HOURS_PER_YEAR,
        }
    }

    pub fn annual_hours(&self) -> f64 {
        match self.usage {
            Usage::Utilization(u) => u * HOURS_PER_YEAR,
            Usage::AnnualHours(h) => h,
        }
    }
}

/// Reads a `name,power_w,utilization` device file.
pub fn read_devices_csv<R: Read>(reader: R) -> Result<Vec<DeviceProfile>, AnalyticsError> {
    #[derive(Deserialize)]
    struct Raw {
        name: String,
        power_w: f64,
        utilization: f64,
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| AnalyticsError::DeviceFile(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["name", "power_w", "utilization"] {
        return Err(AnalyticsError::DeviceFile(format!(
            "expected header name,power_w,utilization, got {:?}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    rdr.deserialize::<Raw>()
        .map(|row| {
            let row = row.map_err(|e| AnalyticsError::DeviceFile(e.to_string()))?;
            DeviceProfile::new(row.name, row.power_w, Usage::Utilization(row.utilization))
        })
        .collect()
}

/// Illustrative household appliance set; wattages and usage are editable
/// assumptions, not measured values.
pub const SAMPLE_DEVICES_CSV: &str = include_str!("../data/devices.csv");

pub fn sample_devices() -> Vec<DeviceProfile> {
    read_devices_csv(SAMPLE_DEVICES_CSV.as_bytes()).expect("bundled device file is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnualEstimate {
    pub avg_total_power_w: f64,
    pub utilization: f64,
    pub kwh_per_year: f64,
    pub emission: EmissionEstimate,
}

impl fmt::Display for AnnualEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} kWh/yr, {} kg CO2eq/yr",
            fixed(self.kwh_per_year, 2),
            self.emission
        )
    }
}

/// Extrapolates a constant draw over a year at the given utilization.
pub fn annualize(
    avg_total_power_w: f64,
    utilization: f64,
    ctx: &CarbonContext,
) -> Result<AnnualEstimate, AnalyticsError> {
    if !(0.0..=1.0).contains(&utilization) {
        return Err(AnalyticsError::UtilizationOutOfRange(utilization));
    }
    if !(avg_total_power_w > 0.0 && avg_total_power_w.is_finite()) {
        return Err(AnalyticsError::InvalidInput(format!(
            "average power must be positive, got {avg_total_power_w}"
        )));
    }
    let kwh_per_year = avg_total_power_w / 1000.0 * HOURS_PER_YEAR * utilization;
    Ok(AnnualEstimate {
        avg_total_power_w,
        utilization,
        kwh_per_year,
        emission: co2_emissions(kwh_per_year, ctx)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApplianceRow {
    pub name: String,
    pub annual_kg: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ApplianceComparison {
    /// Sorted by descending ratio.
    pub rows: Vec<ApplianceRow>,
    /// Devices left out, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// Expresses an annual estimate as multiples of each device's yearly
/// emissions under the same carbon context.
pub fn appliance_equivalents(
    estimate: &AnnualEstimate,
    devices: &[DeviceProfile],
    ctx: &CarbonContext,
) -> Result<ApplianceComparison, AnalyticsError> {
    if devices.is_empty() {
        return Err(AnalyticsError::EmptyDeviceList);
    }
    let mut out = ApplianceComparison::default();
    for device in devices {
        let annual_kg = annualize(device.power_w, device.utilization(), ctx)?
            .emission
            .mean_kg;
        if annual_kg <= 0.0 {
            out.skipped.push((
                device.name.clone(),
                "zero annual emissions; ratio undefined".into(),
            ));
            continue;
        }
        out.rows.push(ApplianceRow {
            name: device.name.clone(),
            annual_kg,
            ratio: estimate.emission.mean_kg / annual_kg,
        });
    }
    out.rows.sort_by(|a, b| b.ratio.total_cmp(&a.ratio).then_with(|| a.name.cmp(&b.name)));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Model,
    Device,
}

impl RowKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RowKind::Model => "model",
            RowKind::Device => "device",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub power_w: f64,
    pub kind: RowKind,
}

/// Model average draws and device draws in one list, sorted by descending
/// power. Devices above `ceiling_w` are dropped.
pub fn power_comparison_rows(
    records: &[RunRecord],
    devices: &[DeviceProfile],
    ceiling_w: f64,
) -> Vec<ComparisonRow> {
    let mut rows: Vec<ComparisonRow> = records
        .iter()
        .map(|r| ComparisonRow {
            name: r.label.clone(),
            power_w: r.avg_power_w,
            kind: RowKind::Model,
        })
        .chain(
            devices
                .iter()
                .filter(|d| d.power_w <= ceiling_w)
                .map(|d| ComparisonRow {
                    name: d.name.clone(),
                    power_w: d.power_w,
                    kind: RowKind::Device,
                }),
        )
        .collect();
    rows.sort_by(|a, b| b.power_w.total_cmp(&a.power_w).then_with(|| a.name.cmp(&b.name)));
    rows
}
