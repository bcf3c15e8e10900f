//! Trace CSV: `timestamp_s,gpu_index,power_w[,temp_c,sm_util_pct,mem_util_pct]`.

use std::io::{Read, Write};

use super::TraceError;
use crate::telemetry::PowerSample;

const BASE: [&str; 3] = ["timestamp_s", "gpu_index", "power_w"];
const EXTRA: [&str; 3] = ["temp_c", "sm_util_pct", "mem_util_pct"];

fn csv_err(e: impl std::fmt::Display) -> TraceError {
    TraceError::Csv(e.to_string())
}

/// Reads samples from a trace CSV. The header row is required and must be
/// either the 3-column or the 6-column form.
pub fn read_trace_csv<R: Read>(reader: R) -> Result<Vec<PowerSample>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let extended = if names == BASE {
        false
    } else if names.len() == 6 && names[..3] == BASE && names[3..] == EXTRA {
        true
    } else if names.is_empty() || names == [""] {
        return Err(TraceError::Csv("missing header row".into()));
    } else {
        return Err(TraceError::Csv(format!(
            "unexpected header {:?}; expected {}",
            names.join(","),
            BASE.join(",")
        )));
    };

    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let line = i + 2;
        let field = |idx: usize| -> Result<Option<f64>, TraceError> {
            let raw = row.get(idx).unwrap_or("");
            if raw.is_empty() {
                return Ok(None);
            }
            raw.parse::<f64>()
                .map(Some)
                .map_err(|_| TraceError::Csv(format!("line {line}: bad number {raw:?}")))
        };
        let required = |idx: usize| -> Result<f64, TraceError> {
            field(idx)?.ok_or_else(|| TraceError::Csv(format!("line {line}: missing {}", BASE[idx])))
        };
        let gpu_raw = row.get(1).unwrap_or("");
        let gpu_index: u32 = gpu_raw
            .parse()
            .map_err(|_| TraceError::Csv(format!("line {line}: bad gpu_index {gpu_raw:?}")))?;
        let mut sample = PowerSample::new(required(0)?, gpu_index, required(2)?);
        if extended {
            sample.temp_c = field(3)?;
            sample.sm_util_pct = field(4)?;
            sample.mem_util_pct = field(5)?;
        }
        out.push(sample);
    }
    Ok(out)
}

/// Writes samples as trace CSV. The extended columns are emitted when any
/// sample carries thermals or utilization.
pub fn write_trace_csv<W: Write>(writer: W, samples: &[PowerSample]) -> Result<(), TraceError> {
    let extended = samples
        .iter()
        .any(|s| s.temp_c.is_some() || s.sm_util_pct.is_some() || s.mem_util_pct.is_some());
    let mut wtr = TraceCsvWriter::new(writer, extended)?;
    for s in samples {
        wtr.write(s)?;
    }
    wtr.flush()
}

/// Incremental trace writer used by live monitoring.
pub struct TraceCsvWriter<W: Write> {
    inner: csv::Writer<W>,
    extended: bool,
}

impl<W: Write> TraceCsvWriter<W> {
    pub fn new(writer: W, extended: bool) -> Result<Self, TraceError> {
        let mut inner = csv::Writer::from_writer(writer);
        if extended {
            inner.write_record(BASE.iter().chain(EXTRA.iter())).map_err(csv_err)?;
        } else {
            inner.write_record(BASE).map_err(csv_err)?;
        }
        Ok(TraceCsvWriter { inner, extended })
    }

    pub fn write(&mut self, s: &PowerSample) -> Result<(), TraceError> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut row = vec![s.timestamp_s.to_string(), s.gpu_index.to_string(), s.power_w.to_string()];
        if self.extended {
            row.extend([opt(s.temp_c), opt(s.sm_util_pct), opt(s.mem_util_pct)]);
        }
        self.inner.write_record(&row).map_err(csv_err)
    }

    pub fn flush(&mut self) -> Result<(), TraceError> {
        self.inner.flush().map_err(csv_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_mandatory() {
        assert!(read_trace_csv("0,0,100\n".as_bytes()).is_err());
        assert!(read_trace_csv("".as_bytes()).is_err());
        let ok = read_trace_csv("timestamp_s,gpu_index,power_w\n0,0,100\n1,0,101\n".as_bytes()).unwrap();
        assert_eq!(ok.len(), 2);
        assert_eq!(ok[1].power_w, 101.0);
    }

    #[test]
    fn extended_columns_allow_blanks() {
        let text = "timestamp_s,gpu_index,power_w,temp_c,sm_util_pct,mem_util_pct\n0,1,90,61,,40\n";
        let s = read_trace_csv(text.as_bytes()).unwrap();
        assert_eq!(s[0].gpu_index, 1);
        assert_eq!(s[0].temp_c, Some(61.0));
        assert_eq!(s[0].sm_util_pct, None);
        assert_eq!(s[0].mem_util_pct, Some(40.0));
    }

    proptest! {
        #[test]
        fn write_read_round_trip(
            rows in prop::collection::vec((0.0f64..1e6, 0u32..8, 0.0f64..400.0, prop::option::of(0.0f64..100.0)), 0..40)
        ) {
            let samples: Vec<PowerSample> = rows
                .iter()
                .map(|&(t, g, p, u)| PowerSample { sm_util_pct: u, ..PowerSample::new(t, g, p) })
                .collect();
            let mut buf = Vec::new();
            write_trace_csv(&mut buf, &samples).unwrap();
            prop_assert_eq!(read_trace_csv(buf.as_slice()).unwrap(), samples);
        }
    }
}
