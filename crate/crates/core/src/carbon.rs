//! Energy to CO2-equivalent conversion and grid carbon-intensity statistics.
//!
//! Emissions are `PUE × kWh × intensity / 1000` kg. The reported ± is the
//! same product taken with the intensity's standard deviation: energy and
//! PUE are treated as exact, so PUE variance is not propagated.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::iter::Sum;
use std::ops::Add;
use std::sync::Arc;

use chrono::{DateTime, FixedOffset, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numfmt::fixed;

/// Global average data-centre PUE used when none is configured.
pub const DEFAULT_PUE: f64 = 1.59;

#[derive(Debug, Error, PartialEq)]
pub enum CarbonError {
    #[error("energy must be non-negative, got {0} kWh")]
    NegativeEnergy(f64),
    #[error("PUE must be at least 1.0, got {0}")]
    InvalidPue(f64),
    #[error("invalid carbon intensity for {region}: {reason}")]
    InvalidIntensity { region: String, reason: String },
    #[error("intensity history for {0} is empty")]
    EmptyHistory(String),
    #[error("intensity history for {region} has non-positive value {value} at {at}")]
    NonPositiveValue {
        region: String,
        value: f64,
        at: String,
    },
    #[error("unknown region {region:?} (known: {known})")]
    UnknownRegion { region: String, known: String },
    #[error("intensity history csv: {0}")]
    Csv(String),
}

/// Grid carbon intensity for one region, in g CO2eq per kWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarbonIntensity {
    pub region: String,
    pub mean_g_per_kwh: f64,
    pub std_g_per_kwh: f64,
    pub provenance: String,
}

impl CarbonIntensity {
    pub fn new(
        region: impl Into<String>,
        mean_g_per_kwh: f64,
        std_g_per_kwh: f64,
        provenance: impl Into<String>,
    ) -> Result<Self, CarbonError> {
        let region = region.into();
        if !(mean_g_per_kwh > 0.0 && mean_g_per_kwh.is_finite()) {
            return Err(CarbonError::InvalidIntensity {
                region,
                reason: format!("mean must be positive, got {mean_g_per_kwh}"),
            });
        }
        if !(std_g_per_kwh >= 0.0 && std_g_per_kwh.is_finite()) {
            return Err(CarbonError::InvalidIntensity {
                region,
                reason: format!("std must be non-negative, got {std_g_per_kwh}"),
            });
        }
        Ok(CarbonIntensity {
            region,
            mean_g_per_kwh,
            std_g_per_kwh,
            provenance: provenance.into(),
        })
    }

    pub fn ireland() -> Self {
        Self::new(
            "IE",
            229.8718,
            77.4026,
            "built-in: electricityMap history, first half of 2020",
        )
        .expect("valid constant")
    }

    pub fn netherlands() -> Self {
        Self::new(
            "NL",
            399.3685,
            31.9251,
            "built-in: electricityMap history, first half of 2020",
        )
        .expect("valid constant")
    }
}

impl fmt::Display for CarbonIntensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} ± {} g CO2/kWh",
            self.region,
            fixed(self.mean_g_per_kwh, 4),
            fixed(self.std_g_per_kwh, 4)
        )
    }
}

/// Parameters of the emission formula.
#[derive(Debug, Clone, PartialEq)]
pub struct CarbonContext {
    pue: f64,
    pub intensity: CarbonIntensity,
}

impl CarbonContext {
    pub fn new(pue: f64, intensity: CarbonIntensity) -> Result<Self, CarbonError> {
        if !(pue >= 1.0 && pue.is_finite()) {
            return Err(CarbonError::InvalidPue(pue));
        }
        Ok(CarbonContext { pue, intensity })
    }

    pub fn with_default_pue(intensity: CarbonIntensity) -> Self {
        CarbonContext {
            pue: DEFAULT_PUE,
            intensity,
        }
    }

    pub fn pue(&self) -> f64 {
        self.pue
    }
}

/// CO2-equivalent mass in kilograms, mean ± one standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EmissionEstimate {
    pub mean_kg: f64,
    pub std_kg: f64,
}

impl EmissionEstimate {
    pub const ZERO: EmissionEstimate = EmissionEstimate {
        mean_kg: 0.0,
        std_kg: 0.0,
    };

    pub fn relative_uncertainty(&self) -> Option<f64> {
        (self.mean_kg > 0.0).then(|| self.std_kg / self.mean_kg)
    }
}

/// Standard deviations add linearly: the worst case when all runs share one
/// intensity error.
impl Add for EmissionEstimate {
    type Output = EmissionEstimate;

    fn add(self, rhs: Self) -> Self {
        EmissionEstimate {
            mean_kg: self.mean_kg + rhs.mean_kg,
            std_kg: self.std_kg + rhs.std_kg,
        }
    }
}

impl Sum for EmissionEstimate {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(EmissionEstimate::ZERO, Add::add)
    }
}

impl fmt::Display for EmissionEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ± {}", fixed(self.mean_kg, 2), fixed(self.std_kg, 2))
    }
}

pub fn co2_emissions(kwh: f64, ctx: &CarbonContext) -> Result<EmissionEstimate, CarbonError> {
    if !(kwh >= 0.0 && kwh.is_finite()) {
        return Err(CarbonError::NegativeEnergy(kwh));
    }
    let scaled = ctx.pue * kwh;
    Ok(EmissionEstimate {
        mean_kg: scaled * ctx.intensity.mean_g_per_kwh / 1000.0,
        std_kg: scaled * ctx.intensity.std_g_per_kwh / 1000.0,
    })
}

/// Mean and population standard deviation of an intensity history.
pub fn intensity_stats(
    history: &[(DateTime<Utc>, f64)],
    region: &str,
) -> Result<CarbonIntensity, CarbonError> {
    if history.is_empty() {
        return Err(CarbonError::EmptyHistory(region.to_string()));
    }
    if let Some((at, value)) = history.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
        return Err(CarbonError::NonPositiveValue {
            region: region.to_string(),
            value: *value,
            at: at.to_rfc3339(),
        });
    }
    let n = history.len() as f64;
    // Welford's update keeps the variance stable for long hourly series.
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for (k, (_, x)) in history.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    let std = (m2 / n).sqrt();
    let start = history.iter().map(|h| h.0).min().expect("non-empty");
    let end = history.iter().map(|h| h.0).max().expect("non-empty");
    CarbonIntensity::new(
        region,
        mean,
        std,
        format!(
            "{} readings from {} to {}; population std",
            history.len(),
            start.to_rfc3339(),
            end.to_rfc3339()
        ),
    )
}

/// One row of an intensity history file.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub timestamp: DateTime<Utc>,
    pub region: String,
    pub g_per_kwh: f64,
}

/// Reads `timestamp_iso8601,region,carbon_intensity_g_per_kwh` rows.
pub fn read_history_csv<R: Read>(reader: R) -> Result<Vec<HistoryRow>, CarbonError> {
    #[derive(Deserialize)]
    struct Raw {
        timestamp_iso8601: String,
        region: String,
        carbon_intensity_g_per_kwh: f64,
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<Raw>().enumerate() {
        let row = row.map_err(|e| CarbonError::Csv(e.to_string()))?;
        let ts = DateTime::<FixedOffset>::parse_from_rfc3339(&row.timestamp_iso8601)
            .map_err(|e| {
                CarbonError::Csv(format!(
                    "line {}: bad timestamp {:?}: {e}",
                    i + 2,
                    row.timestamp_iso8601
                ))
            })?;
        out.push(HistoryRow {
            timestamp: ts.with_timezone(&Utc),
            region: row.region,
            g_per_kwh: row.carbon_intensity_g_per_kwh,
        });
    }
    Ok(out)
}

/// History points for one region, in file order.
pub fn history_for(rows: &[HistoryRow], region: &str) -> Vec<(DateTime<Utc>, f64)> {
    rows.iter()
        .filter(|r| r.region.eq_ignore_ascii_case(region))
        .map(|r| (r.timestamp, r.g_per_kwh))
        .collect()
}

/// Region code to intensity mapping. Clones share storage until one of them
/// registers an entry.
#[derive(Debug, Clone)]
pub struct IntensityRegistry {
    entries: Arc<BTreeMap<String, CarbonIntensity>>,
}

impl Default for IntensityRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl IntensityRegistry {
    pub fn builtin() -> Self {
        let entries = [CarbonIntensity::ireland(), CarbonIntensity::netherlands()]
            .into_iter()
            .map(|c| (c.region.clone(), c))
            .collect();
        IntensityRegistry {
            entries: Arc::new(entries),
        }
    }

    pub fn register(&mut self, mut intensity: CarbonIntensity) {
        intensity.region = intensity.region.to_ascii_uppercase();
        Arc::make_mut(&mut self.entries).insert(intensity.region.clone(), intensity);
    }

    pub fn lookup(&self, region: &str) -> Result<&CarbonIntensity, CarbonError> {
        self.entries
            .get(&region.to_ascii_uppercase())
            .ok_or_else(|| CarbonError::UnknownRegion {
                region: region.to_string(),
                known: self.codes().join(", "),
            })
    }

    pub fn codes(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CarbonIntensity> {
        self.entries.values()
    }

    pub fn context(&self, region: &str, pue: f64) -> Result<CarbonContext, CarbonError> {
        CarbonContext::new(pue, self.lookup(region)?.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn ie() -> CarbonContext {
        CarbonContext::with_default_pue(CarbonIntensity::ireland())
    }

    fn nl() -> CarbonContext {
        CarbonContext::with_default_pue(CarbonIntensity::netherlands())
    }

    #[test]
    fn table_rows_reproduce() {
        assert_eq!(co2_emissions(14.07, &ie()).unwrap().to_string(), "5.14 ± 1.73");
        assert_eq!(co2_emissions(6.33, &nl()).unwrap().to_string(), "4.02 ± 0.32");
        assert_eq!(co2_emissions(0.22, &ie()).unwrap().to_string(), "0.08 ± 0.03");
        assert_eq!(co2_emissions(0.0, &ie()).unwrap(), EmissionEstimate::ZERO);
    }

    #[test]
    fn negative_energy_and_bad_pue_rejected() {
        assert_eq!(co2_emissions(-1.0, &ie()), Err(CarbonError::NegativeEnergy(-1.0)));
        assert!(CarbonContext::new(0.9, CarbonIntensity::ireland()).is_err());
        assert!(CarbonIntensity::new("X", 0.0, 1.0, "").is_err());
        assert!(CarbonIntensity::new("X", 10.0, -1.0, "").is_err());
    }

    #[test]
    fn registry_lookup() {
        let reg = IntensityRegistry::builtin();
        let ie = reg.lookup("IE").unwrap();
        assert_eq!((ie.mean_g_per_kwh, ie.std_g_per_kwh), (229.8718, 77.4026));
        let nl = reg.lookup("nl").unwrap();
        assert_eq!((nl.mean_g_per_kwh, nl.std_g_per_kwh), (399.3685, 31.9251));
        match reg.lookup("XX") {
            Err(CarbonError::UnknownRegion { known, .. }) => assert_eq!(known, "IE, NL"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn registry_copy_on_update() {
        let base = IntensityRegistry::builtin();
        let mut edited = base.clone();
        edited.register(CarbonIntensity::new("fr", 56.0, 10.0, "user").unwrap());
        assert!(edited.lookup("FR").is_ok());
        assert!(base.lookup("FR").is_err());
    }

    fn at(h: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2020, 1, 1, h, 0, 0).unwrap()
    }

    #[test]
    fn stats_examples() {
        let c = intensity_stats(&[(at(0), 200.0), (at(1), 200.0)], "IE").unwrap();
        assert_eq!((c.mean_g_per_kwh, c.std_g_per_kwh), (200.0, 0.0));
        let c = intensity_stats(&[(at(0), 100.0), (at(1), 300.0)], "IE").unwrap();
        assert_eq!((c.mean_g_per_kwh, c.std_g_per_kwh), (200.0, 100.0));
        assert!(c.provenance.contains("population std"));
        assert!(c.provenance.contains("2020-01-01T00:00:00"));
        assert_eq!(intensity_stats(&[], "IE"), Err(CarbonError::EmptyHistory("IE".into())));
        assert!(matches!(
            intensity_stats(&[(at(0), 0.0)], "IE"),
            Err(CarbonError::NonPositiveValue { .. })
        ));
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let history: Vec<_> = (0..1000)
            .map(|i| (at(0) + chrono::Duration::hours(i), rng.gen_range(50.0..700.0)))
            .collect();
        let got = intensity_stats(&history, "NL").unwrap();
        let n = history.len() as f64;
        let mean = history.iter().map(|h| h.1).sum::<f64>() / n;
        let var = history.iter().map(|h| (h.1 - mean).powi(2)).sum::<f64>() / n;
        assert!((got.mean_g_per_kwh - mean).abs() / mean < 1e-9);
        assert!((got.std_g_per_kwh - var.sqrt()).abs() / var.sqrt() < 1e-9);
    }

    #[test]
    fn history_csv_parsing() {
        let text = "timestamp_iso8601,region,carbon_intensity_g_per_kwh\n\
                    2020-01-01T00:00:00Z,IE,100\n2020-01-01T01:00:00+01:00,NL,300\n2020-01-01T02:00:00Z,IE,300\n";
        let rows = read_history_csv(text.as_bytes()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].timestamp, at(0));
        let ie = history_for(&rows, "IE");
        let c = intensity_stats(&ie, "IE").unwrap();
        assert_eq!((c.mean_g_per_kwh, c.std_g_per_kwh), (200.0, 100.0));
        assert!(read_history_csv("timestamp_iso8601,region,carbon_intensity_g_per_kwh\nyesterday,IE,1\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn linear_in_each_factor(kwh in 0.01f64..1e4, pue in 1.0f64..3.0, mean in 1.0f64..1000.0, std in 0.0f64..300.0) {
            let ctx = CarbonContext::new(pue, CarbonIntensity::new("R", mean, std, "").unwrap()).unwrap();
            let base = co2_emissions(kwh, &ctx).unwrap();
            let dk = co2_emissions(2.0 * kwh, &ctx).unwrap();
            let dp = co2_emissions(kwh, &CarbonContext::new(2.0 * pue, ctx.intensity.clone()).unwrap()).unwrap();
            let di = co2_emissions(kwh, &CarbonContext::new(pue, CarbonIntensity::new("R", 2.0 * mean, std, "").unwrap()).unwrap()).unwrap();
            prop_assert_eq!(dk.mean_kg, 2.0 * base.mean_kg);
            prop_assert_eq!(dp.mean_kg, 2.0 * base.mean_kg);
            prop_assert_eq!(di.mean_kg, 2.0 * base.mean_kg);
            let rel = base.relative_uncertainty().unwrap();
            prop_assert!((rel - std / mean).abs() <= 1e-12 * (1.0 + std / mean));
        }
    }
}
