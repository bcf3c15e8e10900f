//! Line parser for `nvidia-smi dmon` style output.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::gpu::GpuSpec;
use super::{ParseError, TelemetryError};

/// Column order printed by `nvidia-smi dmon` with its default metric groups.
pub const DEFAULT_COLUMNS: [&str; 10] = [
    "gpu", "pwr", "gtemp", "mtemp", "sm", "mem", "enc", "dec", "mclk", "pclk",
];

/// Column names that carry an explicit per-line timestamp in seconds.
const TIMESTAMP_COLUMNS: [&str; 2] = ["ts", "timestamp"];

/// One power reading for one board.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub timestamp_s: f64,
    pub gpu_index: u32,
    pub power_w: f64,
    pub temp_c: Option<f64>,
    pub sm_util_pct: Option<f64>,
    pub mem_util_pct: Option<f64>,
}

impl PowerSample {
    pub fn new(timestamp_s: f64, gpu_index: u32, power_w: f64) -> Self {
        PowerSample {
            timestamp_s,
            gpu_index,
            power_w,
            temp_c: None,
            sm_util_pct: None,
            mem_util_pct: None,
        }
    }
}

/// Positional mapping from whitespace-separated tokens to column names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnLayout {
    columns: Vec<String>,
    gpu: usize,
    pwr: usize,
    gtemp: Option<usize>,
    sm: Option<usize>,
    mem: Option<usize>,
    ts: Option<usize>,
}

impl Default for ColumnLayout {
    fn default() -> Self {
        Self::new(DEFAULT_COLUMNS).expect("default layout is valid")
    }
}

impl ColumnLayout {
    pub fn new<I, S>(columns: I) -> Result<Self, TelemetryError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let columns: Vec<String> = columns
            .into_iter()
            .map(|c| c.as_ref().trim().to_ascii_lowercase())
            .filter(|c| !c.is_empty())
            .collect();
        let find = |name: &str| columns.iter().position(|c| c == name);
        let gpu = find("gpu")
            .ok_or_else(|| TelemetryError::InvalidLayout("layout lacks a `gpu` column".into()))?;
        let pwr = find("pwr")
            .ok_or_else(|| TelemetryError::InvalidLayout("layout lacks a `pwr` column".into()))?;
        let ts = TIMESTAMP_COLUMNS.iter().find_map(|name| find(name));
        Ok(ColumnLayout {
            gpu,
            pwr,
            gtemp: find("gtemp"),
            sm: find("sm"),
            mem: find("mem"),
            ts,
            columns,
        })
    }

    /// Parses a comma or whitespace separated list such as `gpu,pwr,sm`.
    pub fn parse(spec: &str) -> Result<Self, TelemetryError> {
        Self::new(spec.split(|c: char| c == ',' || c.is_whitespace()))
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Whether lines carry their own timestamp.
    pub fn has_timestamp(&self) -> bool {
        self.ts.is_some()
    }
}

fn is_absent(token: &str) -> bool {
    token == "-"
}

fn number(token: &str, column: &str) -> Result<f64, ParseError> {
    let value: f64 = token.parse().map_err(|_| ParseError::MalformedLine {
        reason: format!("non-numeric value {token:?} in column `{column}`"),
    })?;
    if !value.is_finite() {
        return Err(ParseError::MalformedLine {
            reason: format!("non-finite value {token:?} in column `{column}`"),
        });
    }
    Ok(value)
}

fn optional(tokens: &[&str], idx: Option<usize>, column: &str) -> Result<Option<f64>, ParseError> {
    match idx {
        None => Ok(None),
        Some(i) if is_absent(tokens[i]) => Ok(None),
        Some(i) => number(tokens[i], column).map(Some),
    }
}

/// Parses one dmon line.
///
/// Returns `Ok(None)` for blank lines and `#` header lines. When the layout
/// has no timestamp column the returned sample carries `timestamp_s = 0.0`
/// and the caller is expected to stamp it.
pub fn parse_dmon_line(line: &str, layout: &ColumnLayout) -> Result<Option<PowerSample>, ParseError> {
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return Ok(None);
    }
    let tokens: Vec<&str> = trimmed.split_whitespace().collect();
    if tokens.len() != layout.len() {
        return Err(ParseError::MalformedLine {
            reason: format!(
                "expected {} columns, found {}",
                layout.len(),
                tokens.len()
            ),
        });
    }

    let gpu_token = tokens[layout.gpu];
    let gpu_index: u32 = gpu_token.parse().map_err(|_| ParseError::MalformedLine {
        reason: format!("invalid gpu index {gpu_token:?}"),
    })?;

    let pwr_token = tokens[layout.pwr];
    if is_absent(pwr_token) {
        return Err(ParseError::MalformedLine {
            reason: "missing power reading".into(),
        });
    }
    let power_w = number(pwr_token, "pwr")?;
    if power_w < 0.0 {
        return Err(ParseError::NegativePower { value: power_w });
    }

    let timestamp_s = match layout.ts {
        Some(i) if is_absent(tokens[i]) => {
            return Err(ParseError::MalformedLine {
                reason: "missing timestamp".into(),
            })
        }
        Some(i) => number(tokens[i], &layout.columns[i])?,
        None => 0.0,
    };

    Ok(Some(PowerSample {
        timestamp_s,
        gpu_index,
        power_w,
        temp_c: optional(&tokens, layout.gtemp, "gtemp")?,
        sm_util_pct: optional(&tokens, layout.sm, "sm")?,
        mem_util_pct: optional(&tokens, layout.mem, "mem")?,
    }))
}

/// Formats a sample as a dmon line in `layout`; columns without a sample
/// field are written as `-`.
pub fn format_dmon_line(sample: &PowerSample, layout: &ColumnLayout) -> String {
    let mut out = String::new();
    for (i, _) in layout.columns.iter().enumerate() {
        let token = if i == layout.gpu {
            sample.gpu_index.to_string()
        } else if i == layout.pwr {
            sample.power_w.to_string()
        } else if Some(i) == layout.ts {
            sample.timestamp_s.to_string()
        } else if Some(i) == layout.gtemp {
            opt_token(sample.temp_c)
        } else if Some(i) == layout.sm {
            opt_token(sample.sm_util_pct)
        } else if Some(i) == layout.mem {
            opt_token(sample.mem_util_pct)
        } else {
            "-".to_string()
        };
        let _ = write!(out, " {token:>5}");
    }
    out
}

fn opt_token(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

/// Checks a sample against the physical invariants, optionally bounded by
/// a board spec.
pub fn validate_sample(sample: PowerSample, spec: Option<&GpuSpec>) -> Result<PowerSample, TelemetryError> {
    if !sample.power_w.is_finite() || !sample.timestamp_s.is_finite() {
        return Err(TelemetryError::Parse {
            line: None,
            source: ParseError::MalformedLine {
                reason: "non-finite field".into(),
            },
        });
    }
    if sample.power_w < 0.0 {
        return Err(TelemetryError::Parse {
            line: None,
            source: ParseError::NegativePower {
                value: sample.power_w,
            },
        });
    }
    if let Some(spec) = spec {
        let ceiling = spec.power_ceiling_w();
        if sample.power_w > ceiling {
            return Err(TelemetryError::PowerOutOfRange {
                power_w: sample.power_w,
                ceiling_w: ceiling,
                gpu: spec.name.clone(),
            });
        }
    }
    for (field, value) in [
        ("sm_util_pct", sample.sm_util_pct),
        ("mem_util_pct", sample.mem_util_pct),
    ] {
        if let Some(v) = value {
            if !(0.0..=100.0).contains(&v) {
                return Err(TelemetryError::UtilizationOutOfRange { field, value: v });
            }
        }
    }
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_and_blank_lines_are_skipped() {
        let layout = ColumnLayout::default();
        let header = "# gpu   pwr gtemp mtemp    sm   mem   enc   dec  mclk  pclk";
        assert_eq!(parse_dmon_line(header, &layout).unwrap(), None);
        assert_eq!(parse_dmon_line("# Idx     W     C     C     %     %     %     %   MHz   MHz", &layout).unwrap(), None);
        assert_eq!(parse_dmon_line("", &layout).unwrap(), None);
        assert_eq!(parse_dmon_line("   \t ", &layout).unwrap(), None);
    }

    #[test]
    fn default_layout_maps_by_position() {
        let layout = ColumnLayout::default();
        let line = "    0   143    62     -    95    51     0     0  5005  1481";
        let s = parse_dmon_line(line, &layout).unwrap().unwrap();
        assert_eq!(s.gpu_index, 0);
        assert_eq!(s.power_w, 143.0);
        assert_eq!(s.temp_c, Some(62.0));
        assert_eq!(s.sm_util_pct, Some(95.0));
        assert_eq!(s.mem_util_pct, Some(51.0));
    }

    #[test]
    fn dash_power_is_malformed_not_zero() {
        let layout = ColumnLayout::default();
        let line = "    0     -    62     -    95    51     0     0  5005  1481";
        assert!(matches!(
            parse_dmon_line(line, &layout),
            Err(ParseError::MalformedLine { .. })
        ));
    }

    #[test]
    fn column_count_and_numeric_errors() {
        let layout = ColumnLayout::default();
        assert!(matches!(
            parse_dmon_line("0 143 62", &layout),
            Err(ParseError::MalformedLine { .. })
        ));
        assert!(matches!(
            parse_dmon_line("x 143 62 - 95 51 0 0 5005 1481", &layout),
            Err(ParseError::MalformedLine { .. })
        ));
        assert!(matches!(
            parse_dmon_line("0 abc 62 - 95 51 0 0 5005 1481", &layout),
            Err(ParseError::MalformedLine { .. })
        ));
        assert!(matches!(
            parse_dmon_line("0 -12 62 - 95 51 0 0 5005 1481", &layout),
            Err(ParseError::NegativePower { .. })
        ));
    }

    #[test]
    fn layout_requires_gpu_and_pwr() {
        assert!(ColumnLayout::parse("gpu,sm").is_err());
        assert!(ColumnLayout::parse("pwr sm").is_err());
        let l = ColumnLayout::parse("ts,gpu,pwr").unwrap();
        assert!(l.has_timestamp());
        let s = parse_dmon_line("12.5 3 99", &l).unwrap().unwrap();
        assert_eq!((s.timestamp_s, s.gpu_index, s.power_w), (12.5, 3, 99.0));
    }

    #[test]
    fn validation_against_board_spec() {
        let spec = GpuSpec::gtx_1080ti();
        assert!(validate_sample(PowerSample::new(0.0, 0, 250.0), Some(&spec)).is_ok());
        assert!(validate_sample(PowerSample::new(0.0, 0, 300.0), Some(&spec)).is_ok());
        assert!(matches!(
            validate_sample(PowerSample::new(0.0, 0, 301.0), Some(&spec)),
            Err(TelemetryError::PowerOutOfRange { .. })
        ));
        assert!(validate_sample(PowerSample::new(0.0, 0, 0.0), None).is_ok());

        let mut s = PowerSample::new(0.0, 0, 100.0);
        s.sm_util_pct = Some(101.0);
        assert!(matches!(
            validate_sample(s, None),
            Err(TelemetryError::UtilizationOutOfRange { .. })
        ));
    }

    fn opt_metric() -> impl Strategy<Value = Option<f64>> {
        prop_oneof![Just(None), (0u32..=1000).prop_map(|v| Some(v as f64 / 10.0))]
    }

    proptest! {
        #[test]
        fn format_then_parse_round_trips(
            gpu in 0u32..16,
            power in 0.0f64..400.0,
            temp in opt_metric(),
            sm in opt_metric(),
            mem in opt_metric(),
        ) {
            let layout = ColumnLayout::default();
            let sample = PowerSample { timestamp_s: 0.0, gpu_index: gpu, power_w: power, temp_c: temp, sm_util_pct: sm, mem_util_pct: mem };
            let line = format_dmon_line(&sample, &layout);
            let back = parse_dmon_line(&line, &layout).unwrap().unwrap();
            prop_assert_eq!(back, sample);
        }
    }
}
