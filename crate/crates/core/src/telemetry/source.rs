use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::time::{SystemTime, UNIX_EPOCH};

use super::dmon::{parse_dmon_line, ColumnLayout, PowerSample};
use super::TelemetryError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    FileReplay,
    ProcessStream,
}

/// How the timestamps of a sample stream were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampOrigin {
    /// Carried by the input lines themselves.
    Recorded,
    /// Derived from a start time and the nominal interval.
    Synthesized,
    /// Taken from the reader's clock as lines arrived.
    ReaderClock,
}

/// Where samples come from and how they are spaced.
#[derive(Debug, Clone)]
pub struct TelemetrySource {
    pub kind: SourceKind,
    /// File path for replay, command line for a live sampler.
    pub origin: String,
    pub nominal_interval_s: f64,
    /// First synthesized timestamp in replay mode.
    pub start_s: f64,
    pub layout: ColumnLayout,
}

impl TelemetrySource {
    pub fn replay(path: impl Into<PathBuf>, nominal_interval_s: f64) -> Self {
        TelemetrySource {
            kind: SourceKind::FileReplay,
            origin: path.into().display().to_string(),
            nominal_interval_s,
            start_s: 0.0,
            layout: ColumnLayout::default(),
        }
    }

    pub fn process(command: impl Into<String>, nominal_interval_s: f64) -> Self {
        TelemetrySource {
            kind: SourceKind::ProcessStream,
            origin: command.into(),
            nominal_interval_s,
            start_s: 0.0,
            layout: ColumnLayout::default(),
        }
    }

    pub fn with_layout(mut self, layout: ColumnLayout) -> Self {
        self.layout = layout;
        self
    }

    pub fn with_start(mut self, start_s: f64) -> Self {
        self.start_s = start_s;
        self
    }

    pub fn timestamp_origin(&self) -> TimestampOrigin {
        if self.layout.has_timestamp() {
            TimestampOrigin::Recorded
        } else {
            match self.kind {
                SourceKind::FileReplay => TimestampOrigin::Synthesized,
                SourceKind::ProcessStream => TimestampOrigin::ReaderClock,
            }
        }
    }
}

/// Timestamp provider for live streams.
pub trait Clock: Send {
    fn now_s(&self) -> f64;
}

/// Wall clock in seconds since the Unix epoch.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_s(&self) -> f64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0)
    }
}

/// Opens a source and returns a stream of parsed samples in arrival order.
pub fn read_source(
    source: &TelemetrySource,
    clock: Box<dyn Clock>,
) -> Result<SampleStream, TelemetryError> {
    if !(source.nominal_interval_s > 0.0 && source.nominal_interval_s.is_finite()) {
        return Err(TelemetryError::InvalidInterval(source.nominal_interval_s));
    }
    let (reader, child): (Box<dyn BufRead + Send>, Option<Child>) = match source.kind {
        SourceKind::FileReplay => {
            let file = File::open(&source.origin).map_err(|e| TelemetryError::SourceUnavailable {
                origin: source.origin.clone(),
                reason: e.to_string(),
            })?;
            (Box::new(BufReader::new(file)), None)
        }
        SourceKind::ProcessStream => {
            let argv = shlex::split(&source.origin)
                .filter(|a| !a.is_empty())
                .ok_or_else(|| TelemetryError::SourceUnavailable {
                    origin: source.origin.clone(),
                    reason: "cannot split command line".into(),
                })?;
            let mut child = Command::new(&argv[0])
                .args(&argv[1..])
                .stdin(Stdio::null())
                .stdout(Stdio::piped())
                .stderr(Stdio::null())
                .spawn()
                .map_err(|e| TelemetryError::SourceUnavailable {
                    origin: source.origin.clone(),
                    reason: format!("spawn failed: {e}"),
                })?;
            let stdout = child.stdout.take().expect("stdout is piped");
            (Box::new(BufReader::new(stdout)), Some(child))
        }
    };
    Ok(SampleStream {
        origin: source.origin.clone(),
        layout: source.layout.clone(),
        timestamps: source.timestamp_origin(),
        interval_s: source.nominal_interval_s,
        start_s: source.start_s,
        clock,
        reader,
        child,
        line_no: 0,
        emitted: 0,
        cycle: 0,
        cycle_stamp: None,
        seen_in_cycle: BTreeSet::new(),
        done: false,
    })
}

/// Single-consumer iterator over the samples of a source.
///
/// A monitoring cycle prints one line per GPU; a new cycle starts when a
/// GPU index repeats. All samples of a cycle share one timestamp.
pub struct SampleStream {
    origin: String,
    layout: ColumnLayout,
    timestamps: TimestampOrigin,
    interval_s: f64,
    start_s: f64,
    clock: Box<dyn Clock>,
    reader: Box<dyn BufRead + Send>,
    child: Option<Child>,
    line_no: usize,
    emitted: usize,
    cycle: u64,
    cycle_stamp: Option<f64>,
    seen_in_cycle: BTreeSet<u32>,
    done: bool,
}

impl SampleStream {
    pub fn timestamp_origin(&self) -> TimestampOrigin {
        self.timestamps
    }

    fn stamp(&mut self, sample: &mut PowerSample) {
        if self.timestamps == TimestampOrigin::Recorded {
            return;
        }
        if !self.seen_in_cycle.insert(sample.gpu_index) {
            self.seen_in_cycle.clear();
            self.seen_in_cycle.insert(sample.gpu_index);
            self.cycle += 1;
            self.cycle_stamp = None;
        }
        let stamp = match self.timestamps {
            TimestampOrigin::Synthesized => self.start_s + self.cycle as f64 * self.interval_s,
            _ => *self.cycle_stamp.get_or_insert_with(|| self.clock.now_s()),
        };
        sample.timestamp_s = stamp;
    }

    fn finish(&mut self) -> Option<TelemetryError> {
        self.done = true;
        let mut child = self.child.take()?;
        let status = match child.wait() {
            Ok(s) => s,
            Err(e) => {
                return Some(TelemetryError::SourceUnavailable {
                    origin: self.origin.clone(),
                    reason: e.to_string(),
                })
            }
        };
        if !status.success() {
            Some(TelemetryError::SourceUnavailable {
                origin: self.origin.clone(),
                reason: format!("sampler exited with {status}"),
            })
        } else if self.emitted == 0 {
            Some(TelemetryError::SourceUnavailable {
                origin: self.origin.clone(),
                reason: format!("sampler produced no samples and exited with {status}"),
            })
        } else {
            None
        }
    }
}

impl Iterator for SampleStream {
    type Item = Result<PowerSample, TelemetryError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut line = String::new();
        loop {
            line.clear();
            match self.reader.read_line(&mut line) {
                Ok(0) => return self.finish().map(Err),
                Ok(_) => {}
                Err(e) => {
                    self.done = true;
                    return Some(Err(TelemetryError::SourceUnavailable {
                        origin: self.origin.clone(),
                        reason: e.to_string(),
                    }));
                }
            }
            self.line_no += 1;
            match parse_dmon_line(&line, &self.layout) {
                Ok(None) => continue,
                Ok(Some(mut sample)) => {
                    self.stamp(&mut sample);
                    self.emitted += 1;
                    return Some(Ok(sample));
                }
                Err(source) => {
                    return Some(Err(TelemetryError::Parse {
                        line: Some(self.line_no),
                        source,
                    }))
                }
            }
        }
    }
}

impl Drop for SampleStream {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    struct FixedClock(f64);
    impl Clock for FixedClock {
        fn now_s(&self) -> f64 {
            self.0
        }
    }

    fn replay(contents: &str, interval: f64) -> Vec<Result<PowerSample, TelemetryError>> {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        let src = TelemetrySource::replay(f.path(), interval);
        read_source(&src, Box::new(SystemClock)).unwrap().collect()
    }

    #[test]
    fn replay_synthesizes_spacing() {
        let out = replay(
            "0 100 50 - 10 10 0 0 1 1\n0 110 50 - 10 10 0 0 1 1\n0 120 50 - 10 10 0 0 1 1\n",
            5.0,
        );
        let ts: Vec<f64> = out.iter().map(|r| r.as_ref().unwrap().timestamp_s).collect();
        assert_eq!(ts, vec![0.0, 5.0, 10.0]);
    }

    #[test]
    fn replay_groups_gpus_into_cycles() {
        let out = replay(
            "# gpu pwr gtemp mtemp sm mem enc dec mclk pclk\n\
             0 100 50 - 10 10 0 0 1 1\n1 101 50 - 10 10 0 0 1 1\n\
             0 102 50 - 10 10 0 0 1 1\n1 103 50 - 10 10 0 0 1 1\n",
            1.0,
        );
        let got: Vec<(u32, f64)> = out
            .iter()
            .map(|r| {
                let s = r.as_ref().unwrap();
                (s.gpu_index, s.timestamp_s)
            })
            .collect();
        assert_eq!(got, vec![(0, 0.0), (1, 0.0), (0, 1.0), (1, 1.0)]);
    }

    #[test]
    fn empty_replay_is_empty_stream() {
        assert!(replay("", 5.0).is_empty());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let out = replay("# header\n0 - 1 - 1 1 0 0 1 1\n", 1.0);
        assert_eq!(out.len(), 1);
        match &out[0] {
            Err(TelemetryError::Parse { line, .. }) => assert_eq!(*line, Some(2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_unavailable() {
        let src = TelemetrySource::replay("/nonexistent/dmon.log", 1.0);
        assert!(matches!(
            read_source(&src, Box::new(SystemClock)),
            Err(TelemetryError::SourceUnavailable { .. })
        ));
    }

    #[test]
    fn process_exiting_immediately_is_unavailable() {
        let src = TelemetrySource::process("false", 1.0);
        let out: Vec<_> = read_source(&src, Box::new(SystemClock)).unwrap().collect();
        assert_eq!(out.len(), 1);
        match &out[0] {
            Err(TelemetryError::SourceUnavailable { reason, .. }) => {
                assert!(reason.contains("exit status: 1"), "{reason}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unspawnable_command_is_unavailable() {
        let src = TelemetrySource::process("definitely-not-a-sampler-binary", 1.0);
        assert!(matches!(
            read_source(&src, Box::new(SystemClock)),
            Err(TelemetryError::SourceUnavailable { .. })
        ));
    }

    #[test]
    fn process_stream_stamps_with_clock() {
        let src = TelemetrySource::process("printf '0 140 60 - 90 40 0 0 1 1\\n'", 1.0);
        let out: Vec<_> = read_source(&src, Box::new(FixedClock(42.0)))
            .unwrap()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].timestamp_s, 42.0);
        assert_eq!(out[0].power_w, 140.0);
    }
}
