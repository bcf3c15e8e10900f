//! Append-only run store backed by a JSON-lines file.
//!
//! Layout under the store root:
//!
//! ```text
//! <root>/runs.jsonl        one record per line
//! <root>/traces/<id>.csv   optional raw traces
//! <root>/config.toml       user configuration
//! ```
//!
//! Writers hold an exclusive lock on `<root>/.lock` and replace `runs.jsonl`
//! through a temporary file and rename, so an interrupted write leaves the
//! previous file intact.

mod fixtures;

pub use fixtures::{fixture_records, fixture_rows, FixtureRow};

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{
    consistency_check, Architecture, Audit, Phase, Precision, RunRecord,
    DEFAULT_CONSISTENCY_THRESHOLD,
};
use crate::telemetry::{GpuRegistry, PowerSample};
use crate::timeseries::write_trace_csv;

pub const HOME_ENV: &str = "ECOTRACE_HOME";
pub const SCHEMA_VERSION: u32 = 1;

const RUNS_FILE: &str = "runs.jsonl";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("record id {0:?} already exists")]
    DuplicateId(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize, Deserialize)]
struct StoredLine {
    schema_version: u32,
    #[serde(flatten)]
    record: RunRecord,
}

/// Conjunctive record filter; unset fields match everything.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordFilter {
    pub architecture: Option<Architecture>,
    pub phase: Option<Phase>,
    pub gpu_model: Option<String>,
    pub lang_pair: Option<String>,
    pub precision: Option<Precision>,
}

impl RecordFilter {
    pub fn matches(&self, r: &RunRecord) -> bool {
        self.architecture.as_ref().is_none_or(|a| *a == r.architecture)
            && self.phase.is_none_or(|p| p == r.phase)
            && self
                .gpu_model
                .as_ref()
                .is_none_or(|g| g.eq_ignore_ascii_case(&r.gpu_model))
            && self
                .lang_pair
                .as_ref()
                .is_none_or(|l| l.eq_ignore_ascii_case(&r.lang_pair))
            && self.precision.is_none_or(|p| p == r.precision)
    }
}

/// Outcome of a fixture import.
#[derive(Debug, Default)]
pub struct ImportReport {
    pub imported: usize,
    pub annotated: usize,
    pub duplicates: Vec<StoreError>,
}

#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
    records: Vec<RunRecord>,
    index: BTreeMap<String, usize>,
    gpus: GpuRegistry,
}

/// `$ECOTRACE_HOME`, else `$HOME/.ecotrace`, else `./.ecotrace`.
pub fn default_root() -> PathBuf {
    if let Some(home) = std::env::var_os(HOME_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(home);
    }
    std::env::var_os("HOME")
        .map(|h| PathBuf::from(h).join(".ecotrace"))
        .unwrap_or_else(|| PathBuf::from(".ecotrace"))
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        Self::open_with(root, GpuRegistry::builtin())
    }

    pub fn open_with(root: impl Into<PathBuf>, gpus: GpuRegistry) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let mut store = RunStore {
            root,
            records: Vec::new(),
            index: BTreeMap::new(),
            gpus,
        };
        store.reload()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn runs_path(&self) -> PathBuf {
        self.root.join(RUNS_FILE)
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn trace_path(&self, id: &str) -> PathBuf {
        self.root.join("traces").join(format!("{id}.csv"))
    }

    /// Records in insertion order.
    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&RunRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Matching records ordered by id.
    pub fn query(&self, filter: &RecordFilter) -> Vec<&RunRecord> {
        self.index
            .values()
            .map(|&i| &self.records[i])
            .filter(|r| filter.matches(r))
            .collect()
    }

    pub fn reload(&mut self) -> Result<(), StoreError> {
        let records = read_runs(&self.runs_path())?;
        self.index.clear();
        for (i, r) in records.iter().enumerate() {
            if self.index.insert(r.id.clone(), i).is_some() {
                return Err(StoreError::Corrupt {
                    path: self.runs_path(),
                    line: i + 1,
                    reason: format!("duplicate id {:?}", r.id),
                });
            }
        }
        self.records = records;
        Ok(())
    }

    fn check(&self, record: &RunRecord) -> Result<(), StoreError> {
        record
            .validate(&self.gpus)
            .map_err(|e| StoreError::InvalidRecord(e.to_string()))?;
        if self.index.contains_key(&record.id) {
            return Err(StoreError::DuplicateId(record.id.clone()));
        }
        Ok(())
    }

    pub fn save(&mut self, record: RunRecord) -> Result<String, StoreError> {
        let _lock = self.lock()?;
        self.reload()?;
        self.check(&record)?;
        let id = record.id.clone();
        self.push(record);
        self.persist()?;
        Ok(id)
    }

    /// Loads the bundled dataset. Rows failing the consistency audit are
    /// kept verbatim with an `audit` annotation; existing ids are reported
    /// as duplicates and left untouched.
    pub fn import_fixtures(&mut self) -> Result<ImportReport, StoreError> {
        let _lock = self.lock()?;
        self.reload()?;
        let mut report = ImportReport::default();
        for mut record in fixture_records() {
            match self.check(&record) {
                Ok(()) => {}
                Err(e @ StoreError::DuplicateId(_)) => {
                    report.duplicates.push(e);
                    continue;
                }
                Err(e) => return Err(e),
            }
            if let Ok(c) = consistency_check(&record, DEFAULT_CONSISTENCY_THRESHOLD) {
                if c.status == Audit::Warn {
                    record.audit = Some(format!(
                        "consistency: reported {} kWh vs {:.4} kWh implied by avg_power_w × n_gpus × elapsed_h (relative error {:.3})",
                        record.kwh, c.implied_kwh, c.relative_error
                    ));
                    report.annotated += 1;
                }
            }
            self.push(record);
            report.imported += 1;
        }
        if report.imported > 0 {
            self.persist()?;
        }
        Ok(report)
    }

    pub fn save_trace(&self, id: &str, samples: &[PowerSample]) -> Result<PathBuf, StoreError> {
        let path = self.trace_path(id);
        let dir = path.parent().expect("trace path has a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = path.with_extension("csv.tmp");
        let file = File::create(&tmp).map_err(io_err(&tmp))?;
        write_trace_csv(file, samples).map_err(|e| StoreError::Io {
            path: tmp.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(path)
    }

    fn push(&mut self, record: RunRecord) {
        self.index.insert(record.id.clone(), self.records.len());
        self.records.push(record);
    }

    fn lock(&self) -> Result<File, StoreError> {
        let path = self.root.join(LOCK_FILE);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        file.lock().map_err(io_err(&path))?;
        Ok(file)
    }

    fn persist(&self) -> Result<(), StoreError> {
        let path = self.runs_path();
        let tmp = self.root.join(format!("{RUNS_FILE}.tmp"));
        let mut buf = String::new();
        for r in &self.records {
            buf.push_str(&serialize_record(r));
            buf.push('\n');
        }
        let mut file = File::create(&tmp).map_err(io_err(&tmp))?;
        file.write_all(buf.as_bytes()).map_err(io_err(&tmp))?;
        file.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(())
    }
}

/// The exact line written to `runs.jsonl` for a record.
pub fn serialize_record(record: &RunRecord) -> String {
    let line = StoredLine {
        schema_version: SCHEMA_VERSION,
        record: record.clone(),
    };
    serde_json::to_string(&line).expect("records serialize")
}

fn read_runs(path: &Path) -> Result<Vec<RunRecord>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let stored: StoredLine = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        if stored.schema_version != SCHEMA_VERSION {
            return Err(StoreError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("unsupported schema_version {}", stored.schema_version),
            });
        }
        out.push(stored.record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str) -> RunRecord {
        let mut r = fixture_records().remove(0);
        r.id = id.into();
        r
    }

    #[test]
    fn save_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RunStore::open(dir.path()).unwrap();
        assert_eq!(store.save(sample("a")).unwrap(), "a");
        let again = RunStore::open(dir.path()).unwrap();
        assert_eq!(again.get("a"), Some(&sample("a")));
    }

    #[test]
    fn duplicate_and_invalid_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RunStore::open(dir.path()).unwrap();
        store.save(sample("a")).unwrap();
        assert!(matches!(store.save(sample("a")), Err(StoreError::DuplicateId(_))));
        let mut bad = sample("b");
        bad.elapsed_h = 0.0;
        assert!(matches!(store.save(bad), Err(StoreError::InvalidRecord(_))));
        assert_eq!(RunStore::open(dir.path()).unwrap().len(), 1);
    }

    #[test]
    fn corrupt_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(RUNS_FILE), "{not json}\n").unwrap();
        assert!(matches!(
            RunStore::open(dir.path()),
            Err(StoreError::Corrupt { line: 1, .. })
        ));
    }

    #[test]
    fn stale_temp_file_does_not_affect_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RunStore::open(dir.path()).unwrap();
        store.save(sample("a")).unwrap();
        // A crash between writing the temp file and renaming it.
        fs::write(dir.path().join("runs.jsonl.tmp"), "{\"trunc").unwrap();
        let reopened = RunStore::open(dir.path()).unwrap();
        assert_eq!(reopened.len(), 1);
    }

    #[test]
    fn fixture_queries() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RunStore::open(dir.path()).unwrap();
        let report = store.import_fixtures().unwrap();
        assert_eq!(report.imported, 48);
        assert!(report.duplicates.is_empty());

        let f = RecordFilter {
            phase: Some(Phase::Train),
            gpu_model: Some("1080Ti".into()),
            architecture: Some(Architecture::Lstm),
            ..Default::default()
        };
        let hits = store.query(&f);
        assert_eq!(hits.len(), 4);
        assert!(hits.windows(2).all(|w| w[0].id < w[1].id));

        assert_eq!(store.query(&RecordFilter::default()).len(), 48);
        let int8 = RecordFilter {
            precision: Some(Precision::INT8),
            ..Default::default()
        };
        assert_eq!(store.query(&int8).len(), 8);
    }

    #[test]
    fn reimport_is_rejected_per_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RunStore::open(dir.path()).unwrap();
        store.import_fixtures().unwrap();
        let before = fs::read(store.runs_path()).unwrap();
        let report = store.import_fixtures().unwrap();
        assert_eq!(report.imported, 0);
        assert_eq!(report.duplicates.len(), 48);
        assert_eq!(fs::read(store.runs_path()).unwrap(), before);
    }

    #[test]
    fn failing_rows_are_annotated_not_altered() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RunStore::open(dir.path()).unwrap();
        store.import_fixtures().unwrap();
        let row = store.get("t9-trans-int8-en-fr-p100").unwrap();
        assert_eq!(row.kwh, 0.02);
        assert!(row.audit.as_deref().unwrap().starts_with("consistency:"));
        assert!(store.get("t5-lstm-en-fr-1080ti").unwrap().audit.is_none());
    }

    #[test]
    fn traces_are_written_under_root() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        let path = store
            .save_trace("run1", &[PowerSample::new(0.0, 0, 100.0)])
            .unwrap();
        assert_eq!(path, dir.path().join("traces/run1.csv"));
        assert_eq!(
            fs::read_to_string(path).unwrap(),
            "timestamp_s,gpu_index,power_w\n0,0,100\n"
        );
    }
}
