//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 I/O or sampler failure.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use clap::{ArgGroup, Args, Parser, Subcommand};

use crate::analytics::{
    annualize, appliance_equivalents, break_even, break_even_workloads, power_comparison_rows,
    read_devices_csv, sample_devices, AnalyticsError, AnnualEstimate, Architecture,
    DeviceProfile, Phase, Precision, RunRecord, DEFAULT_COMPARISON_CEILING_W,
};
use crate::carbon::{
    co2_emissions, history_for, intensity_stats, read_history_csv, CarbonError,
    IntensityRegistry,
};
use crate::config::{Config, ConfigError};
use crate::numfmt::fixed;
use crate::report::{
    carbon_statement, export_chart_data, render_table, ChartRow, Format, ReportBundle,
    ReportError, Table,
};
use crate::store::{default_root, fixture_records, RecordFilter, RunStore, StoreError};
use crate::telemetry::{
    read_source, validate_sample, ColumnLayout, GpuSpec, PowerSample, SystemClock,
    TelemetryError, TelemetrySource, TimestampOrigin,
};
use crate::timeseries::{
    read_trace_csv, write_trace_csv, EnergyRule, Pipeline, TraceCsvWriter, TraceError, TraceSet,
    DEFAULT_GAP_FACTOR,
};

#[derive(Debug, Parser)]
#[command(name = "ecotrace", version, about = "Energy and carbon accounting for GPU workloads")]
struct Cli {
    /// Store directory (overrides ECOTRACE_HOME)
    #[arg(long, global = true, value_name = "DIR")]
    home: Option<PathBuf>,
    /// Output format for tables: md, csv, json or text
    #[arg(long, global = true, value_parser = parse_format, value_name = "FMT")]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a GPU sampler and write its readings to a trace CSV
    Monitor(MonitorArgs),
    /// Convert a recorded dmon log into a trace CSV
    Ingest(IngestArgs),
    /// Integrate a trace CSV to kWh
    Energy(EnergyArgs),
    /// Convert energy to CO2eq for a grid region
    Emissions(EmissionsArgs),
    /// Operating time after which a cheaper-to-run model pays back its training
    Breakeven(BreakevenArgs),
    /// Extrapolate a constant power draw to a year
    Annualize(AnnualizeArgs),
    /// Model power draws next to household devices
    Compare(CompareArgs),
    /// Annual emissions expressed as multiples of household devices
    Appliances(AppliancesArgs),
    /// Carbon impact statement over stored runs
    Statement(StatementArgs),
    /// Import the bundled run records into the store
    Fixtures(FixturesArgs),
    /// Show or compute grid carbon intensities
    Intensity(IntensityArgs),
}

#[derive(Debug, Args)]
struct MonitorArgs {
    /// Sampler command line; `{interval}` is substituted (default from config)
    #[arg(long)]
    command: Option<String>,
    /// Sampling interval in seconds
    #[arg(long, default_value = "1", value_parser = positive, allow_negative_numbers = true)]
    interval: f64,
    #[arg(long)]
    output: PathBuf,
    /// Comma-separated column layout
    #[arg(long)]
    columns: Option<String>,
    /// Validate readings against this board's TDP
    #[arg(long)]
    gpu_model: Option<String>,
    /// Stop after this many samples
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    max_samples: Option<u64>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("dest").required(true).args(["output", "id"])))]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    /// Nominal sampling interval in seconds
    #[arg(long, default_value = "1", value_parser = positive, allow_negative_numbers = true)]
    interval: f64,
    /// Timestamp of the first cycle when the log carries none
    #[arg(long, default_value = "0", value_parser = finite, allow_negative_numbers = true)]
    start: f64,
    #[arg(long)]
    columns: Option<String>,
    #[arg(long)]
    gpu_model: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Store the trace under this id in the store's traces directory
    #[arg(long)]
    id: Option<String>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("src").required(true).args(["trace", "id"])))]
struct EnergyArgs {
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Read the stored trace with this id
    #[arg(long)]
    id: Option<String>,
    /// Nominal sampling interval in seconds
    #[arg(long, default_value = "1", value_parser = positive, allow_negative_numbers = true)]
    interval: f64,
    /// Sum readings × interval instead of resampling to 1 Hz
    #[arg(long, conflicts_with = "trapezoid")]
    raw: bool,
    /// Trapezoidal rule on the resampled grid
    #[arg(long)]
    trapezoid: bool,
    /// Spacing above factor × interval is reported as a gap
    #[arg(long, default_value_t = DEFAULT_GAP_FACTOR, value_parser = positive, allow_negative_numbers = true)]
    gap_factor: f64,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("src").required(true).args(["kwh", "id"])))]
struct EmissionsArgs {
    #[arg(long, value_parser = non_negative, allow_negative_numbers = true)]
    kwh: Option<f64>,
    /// Use the energy of a stored run
    #[arg(long)]
    id: Option<String>,
    /// Grid region code; defaults to the stored run's region with --id
    #[arg(long)]
    region: Option<String>,
    #[arg(long, value_parser = pue_value, allow_negative_numbers = true)]
    pue: Option<f64>,
}

#[derive(Debug, Args)]
struct BreakevenArgs {
    /// Training energy of A (kWh)
    #[arg(long, value_parser = non_negative, allow_negative_numbers = true, conflicts_with = "a_train")]
    train_a: Option<f64>,
    /// Inference power of A (W)
    #[arg(long, value_parser = non_negative, allow_negative_numbers = true, conflicts_with = "a_translate")]
    power_a: Option<f64>,
    #[arg(long, value_parser = non_negative, allow_negative_numbers = true, conflicts_with = "b_train")]
    train_b: Option<f64>,
    #[arg(long, value_parser = non_negative, allow_negative_numbers = true, conflicts_with = "b_translate")]
    power_b: Option<f64>,
    /// Stored training run of A
    #[arg(long, value_name = "ID")]
    a_train: Option<String>,
    /// Stored translation run of A
    #[arg(long, value_name = "ID")]
    a_translate: Option<String>,
    #[arg(long, value_name = "ID")]
    b_train: Option<String>,
    #[arg(long, value_name = "ID")]
    b_translate: Option<String>,
    /// Count translation workloads instead of hours (needs translation run ids)
    #[arg(long)]
    normalize_throughput: bool,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("src").required(true).args(["power", "id"])))]
struct AnnualArgs {
    /// Average draw in W (per GPU when --scale-gpus is given)
    #[arg(long, value_parser = positive, allow_negative_numbers = true)]
    power: Option<f64>,
    /// Use a stored run: workstation draw kWh / h, or avg_power_w × N with --scale-gpus
    #[arg(long)]
    id: Option<String>,
    /// Multiply the per-GPU draw by this GPU count
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    scale_gpus: Option<u32>,
    /// Fraction of the year the system is busy
    #[arg(long, default_value = "1.0", value_parser = fraction, allow_negative_numbers = true)]
    utilization: f64,
    #[arg(long)]
    region: Option<String>,
    #[arg(long, value_parser = pue_value, allow_negative_numbers = true)]
    pue: Option<f64>,
}

#[derive(Debug, Args)]
struct AnnualizeArgs {
    #[command(flatten)]
    annual: AnnualArgs,
}

#[derive(Debug, Args)]
struct DeviceArgs {
    /// Device CSV `name,power_w,utilization|annual_hours` (default: bundled sample)
    #[arg(long)]
    devices: Option<PathBuf>,
    /// Also write `name,value,kind` chart data here
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
struct FilterArgs {
    #[arg(long)]
    arch: Option<Architecture>,
    #[arg(long)]
    phase: Option<Phase>,
    #[arg(long)]
    gpu: Option<String>,
    #[arg(long)]
    pair: Option<String>,
    #[arg(long)]
    precision: Option<Precision>,
}

impl FilterArgs {
    fn filter(&self) -> RecordFilter {
        RecordFilter {
            architecture: self.arch.clone(),
            phase: self.phase,
            gpu_model: self.gpu.clone(),
            lang_pair: self.pair.clone(),
            precision: self.precision,
        }
    }
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    devices: DeviceArgs,
    /// Drop devices drawing more than this (W)
    #[arg(long, default_value_t = DEFAULT_COMPARISON_CEILING_W, value_parser = positive, allow_negative_numbers = true)]
    ceiling: f64,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Debug, Args)]
struct AppliancesArgs {
    #[command(flatten)]
    annual: AnnualArgs,
    #[command(flatten)]
    devices: DeviceArgs,
}

#[derive(Debug, Args)]
struct StatementArgs {
    #[command(flatten)]
    filter: FilterArgs,
    #[arg(long, value_parser = pue_value, allow_negative_numbers = true)]
    pue: Option<f64>,
}

#[derive(Debug, Args)]
struct FixturesArgs {
    /// Render the bundled records instead of importing them
    #[arg(long)]
    list: bool,
    #[command(flatten)]
    filter: FilterArgs,
    #[arg(long, value_parser = pue_value, allow_negative_numbers = true)]
    pue: Option<f64>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("what").required(true).args(["list", "region"])))]
struct IntensityArgs {
    #[arg(long)]
    list: bool,
    #[arg(long)]
    region: Option<String>,
    /// Hourly history CSV `timestamp_iso8601,region,carbon_intensity_g_per_kwh`
    #[arg(long, requires = "region")]
    history: Option<PathBuf>,
    /// Write the computed intensity into config.toml
    #[arg(long, requires = "history")]
    save: bool,
}

fn parse_number(s: &str) -> Result<f64, String> {
    s.trim().parse::<f64>().map_err(|_| format!("{s:?} is not a number"))
}

fn finite(s: &str) -> Result<f64, String> {
    let v = parse_number(s)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s} is not finite"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v = finite(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must not be negative, got {s}"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v = finite(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be positive, got {s}"))
    }
}

fn pue_value(s: &str) -> Result<f64, String> {
    let v = finite(s)?;
    if v >= 1.0 {
        Ok(v)
    } else {
        Err(format!("PUE must be at least 1, got {s}"))
    }
}

fn fraction(s: &str) -> Result<f64, String> {
    let v = finite(s)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("must lie in [0, 1], got {s}"))
    }
}

fn parse_format(s: &str) -> Result<Format, String> {
    s.parse().map_err(|e: ReportError| e.to_string())
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Io(m) => m,
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<TelemetryError> for Failure {
    fn from(e: TelemetryError) -> Self {
        match e {
            TelemetryError::SourceUnavailable { .. } => Failure::Io(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

macro_rules! data_failure {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Data(e.to_string())
            }
        }
    )*};
}
data_failure!(TraceError, CarbonError, AnalyticsError);

fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> Result<File, Failure> {
    File::open(path).map_err(io_failure(path))
}

struct Session<'a> {
    home: PathBuf,
    format: Option<Format>,
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

impl Session<'_> {
    fn config(&self) -> Result<Config, Failure> {
        Ok(Config::load(&self.home.join("config.toml"))?)
    }

    fn store(&self, cfg: &Config) -> Result<RunStore, Failure> {
        Ok(RunStore::open_with(&self.home, cfg.gpus()?)?)
    }

    fn print(&mut self, text: &str) -> Result<(), Failure> {
        self.out
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Io(format!("stdout: {e}")))
    }

    fn println(&mut self, line: &str) -> Result<(), Failure> {
        self.print(&format!("{line}\n"))
    }

    fn note(&mut self, line: &str) {
        let _ = writeln!(self.err, "{line}");
    }

    fn table_format(&self) -> Format {
        self.format.unwrap_or(Format::PlainText)
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return if e.use_stderr() {
                let _ = write!(stderr, "{}", e.render());
                1
            } else {
                let _ = write!(stdout, "{}", e.render());
                0
            };
        }
    };
    let mut session = Session {
        home: cli.home.clone().unwrap_or_else(default_root),
        format: cli.format,
        out: stdout,
        err: stderr,
    };
    match dispatch(cli.command, &mut session) {
        Ok(()) => 0,
        Err(f) => {
            let prefix = if matches!(f, Failure::Usage(_)) {
                "usage error"
            } else {
                "error"
            };
            session.note(&format!("{prefix}: {}", f.message()));
            f.code()
        }
    }
}

fn dispatch(command: Command, s: &mut Session) -> Result<(), Failure> {
    match command {
        Command::Monitor(a) => monitor(a, s),
        Command::Ingest(a) => ingest(a, s),
        Command::Energy(a) => energy(a, s),
        Command::Emissions(a) => emissions(a, s),
        Command::Breakeven(a) => breakeven(a, s),
        Command::Annualize(a) => {
            let (est, _) = annual_estimate(&a.annual, s)?;
            s.println(&est.to_string())
        }
        Command::Compare(a) => compare(a, s),
        Command::Appliances(a) => appliances(a, s),
        Command::Statement(a) => statement(a, s),
        Command::Fixtures(a) => fixtures(a, s),
        Command::Intensity(a) => intensity(a, s),
    }
}

fn layout_for(columns: &Option<String>, cfg: &Config) -> Result<ColumnLayout, Failure> {
    Ok(match columns {
        Some(spec) => ColumnLayout::parse(spec)?,
        None => cfg.layout()?,
    })
}

fn gpu_spec(model: &Option<String>, cfg: &Config) -> Result<Option<GpuSpec>, Failure> {
    match model {
        Some(m) => Ok(Some(cfg.gpus()?.lookup(m)?.clone())),
        None => Ok(None),
    }
}

fn origin_name(o: TimestampOrigin) -> &'static str {
    match o {
        TimestampOrigin::Recorded => "recorded",
        TimestampOrigin::Synthesized => "synthesized",
        TimestampOrigin::ReaderClock => "reader clock",
    }
}

fn monitor(a: MonitorArgs, s: &mut Session) -> Result<(), Failure> {
    let cfg = s.config()?;
    let layout = layout_for(&a.columns, &cfg)?;
    let spec = gpu_spec(&a.gpu_model, &cfg)?;
    let command = match &a.command {
        Some(c) => c.replace("{interval}", &a.interval.to_string()),
        None => cfg.monitor_command(a.interval),
    };
    let source = TelemetrySource::process(command, a.interval).with_layout(layout);
    let stream = read_source(&source, Box::new(SystemClock))?;
    let origin = stream.timestamp_origin();
    let file = File::create(&a.output).map_err(io_failure(&a.output))?;
    let mut writer = TraceCsvWriter::new(BufWriter::new(file), true)?;

    // Bounded hand-off so a slow disk applies back-pressure to the reader.
    let (tx, rx) = mpsc::sync_channel::<Result<PowerSample, TelemetryError>>(64);
    let reader = thread::spawn(move || {
        for item in stream {
            let stop = item.is_err();
            if tx.send(item).is_err() || stop {
                break;
            }
        }
    });

    let mut written = 0u64;
    let mut outcome = Ok(());
    let mut finished = true;
    for item in rx.iter() {
        match item.and_then(|sample| validate_sample(sample, spec.as_ref())) {
            Ok(sample) => {
                writer.write(&sample)?;
                writer.flush()?;
                written += 1;
                if a.max_samples.is_some_and(|m| written >= m) {
                    finished = false;
                    break;
                }
            }
            Err(e) => {
                outcome = Err(Failure::from(e));
                break;
            }
        }
    }
    drop(rx);
    if finished && outcome.is_ok() {
        let _ = reader.join();
    }
    writer.flush()?;
    s.note(&format!("timestamps: {}", origin_name(origin)));
    let summary = format!("{written} samples written to {}", a.output.display());
    match outcome {
        Ok(()) => s.println(&summary),
        Err(f) => {
            s.note(&summary);
            Err(f)
        }
    }
}

fn ingest(a: IngestArgs, s: &mut Session) -> Result<(), Failure> {
    let cfg = s.config()?;
    let layout = layout_for(&a.columns, &cfg)?;
    let spec = gpu_spec(&a.gpu_model, &cfg)?;
    if !a.input.is_file() {
        return Err(Failure::Io(format!("{}: no such file", a.input.display())));
    }
    let source = TelemetrySource::replay(&a.input, a.interval)
        .with_layout(layout)
        .with_start(a.start);
    let stream = read_source(&source, Box::new(SystemClock))?;
    let origin = stream.timestamp_origin();
    let samples = stream
        .map(|r| r.and_then(|sample| validate_sample(sample, spec.as_ref())))
        .collect::<Result<Vec<_>, _>>()?;
    let gpus = samples
        .iter()
        .map(|p| p.gpu_index)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let path = match (&a.output, &a.id) {
        (Some(out), _) => {
            let file = File::create(out).map_err(io_failure(out))?;
            write_trace_csv(BufWriter::new(file), &samples)?;
            out.clone()
        }
        (None, Some(id)) => s.store(&cfg)?.save_trace(id, &samples)?,
        (None, None) => unreachable!("clap requires --output or --id"),
    };
    s.note(&format!("timestamps: {}", origin_name(origin)));
    s.println(&format!(
        "{} samples from {gpus} GPU(s) written to {}",
        samples.len(),
        path.display()
    ))
}

fn energy(a: EnergyArgs, s: &mut Session) -> Result<(), Failure> {
    let path = match (&a.trace, &a.id) {
        (Some(p), _) => p.clone(),
        (None, Some(id)) => s.home.join("traces").join(format!("{id}.csv")),
        (None, None) => unreachable!("clap requires --trace or --id"),
    };
    let samples = read_trace_csv(open(&path)?)?;
    let set = TraceSet::from_samples(path.display().to_string(), a.interval, &samples)?;
    let (pipeline, rule) = match (a.raw, a.trapezoid) {
        (true, _) => (Pipeline::Raw, EnergyRule::Rectangle),
        (false, true) => (Pipeline::Interpolated, EnergyRule::Trapezoid),
        (false, false) => (Pipeline::Interpolated, EnergyRule::Rectangle),
    };
    let summary = set.energy(pipeline, rule, a.gap_factor)?;
    let rule_name = match (pipeline, rule) {
        (Pipeline::Raw, _) => "readings × interval",
        (_, EnergyRule::Rectangle) => "per-second sum",
        (_, EnergyRule::Trapezoid) => "trapezoid",
    };
    s.note(&format!("pipeline: {} ({rule_name})", pipeline.label()));
    for (gpu, gap) in &summary.gaps {
        s.note(&format!(
            "warning: gpu {gpu}: gap of {} s between {} s and {} s",
            gap.duration_s(),
            gap.start_s,
            gap.end_s
        ));
    }
    s.println(&format!("{} kWh", fixed(summary.kwh, 6)))
}

fn stored(store: &RunStore, id: &str) -> Result<RunRecord, Failure> {
    store
        .get(id)
        .cloned()
        .ok_or_else(|| Failure::Data(format!("no stored run with id {id:?}")))
}

fn emissions(a: EmissionsArgs, s: &mut Session) -> Result<(), Failure> {
    if a.id.is_none() && a.region.is_none() {
        return Err(Failure::Usage("--region is required with --kwh".into()));
    }
    let cfg = s.config()?;
    let (kwh, region) = match (&a.id, a.kwh) {
        (Some(id), _) => {
            let rec = stored(&s.store(&cfg)?, id)?;
            (rec.kwh, a.region.clone().unwrap_or(rec.region))
        }
        (None, Some(kwh)) => (kwh, a.region.clone().expect("checked above")),
        (None, None) => unreachable!("clap requires --kwh or --id"),
    };
    let ctx = cfg.intensities()?.context(&region, a.pue.unwrap_or(cfg.pue()))?;
    let est = co2_emissions(kwh, &ctx)?;
    s.println(&format!("{est} kg CO2eq"))
}

fn breakeven(a: BreakevenArgs, s: &mut Session) -> Result<(), Failure> {
    let needs_store = [&a.a_train, &a.a_translate, &a.b_train, &a.b_translate]
        .iter()
        .any(|o| o.is_some());
    if a.normalize_throughput && (a.a_translate.is_none() || a.b_translate.is_none()) {
        return Err(Failure::Usage(
            "--normalize-throughput needs --a-translate and --b-translate".into(),
        ));
    }
    for (num, id, what) in [
        (a.train_a.is_some(), a.a_train.is_some(), "--train-a or --a-train"),
        (a.power_a.is_some(), a.a_translate.is_some(), "--power-a or --a-translate"),
        (a.train_b.is_some(), a.b_train.is_some(), "--train-b or --b-train"),
        (a.power_b.is_some(), a.b_translate.is_some(), "--power-b or --b-translate"),
    ] {
        if !num && !id {
            return Err(Failure::Usage(format!("missing {what}")));
        }
    }
    let store = if needs_store {
        let cfg = s.config()?;
        Some(s.store(&cfg)?)
    } else {
        None
    };
    let record = |id: &Option<String>| -> Result<Option<RunRecord>, Failure> {
        match (id, &store) {
            (Some(id), Some(store)) => stored(store, id).map(Some),
            _ => Ok(None),
        }
    };
    let (a_train, a_tr, b_train, b_tr) = (
        record(&a.a_train)?,
        record(&a.a_translate)?,
        record(&a.b_train)?,
        record(&a.b_translate)?,
    );
    let train_a = a.train_a.or(a_train.map(|r| r.kwh)).expect("checked");
    let train_b = a.train_b.or(b_train.map(|r| r.kwh)).expect("checked");
    if a.normalize_throughput {
        let (wa, wb) = (a_tr.expect("checked").kwh, b_tr.expect("checked").kwh);
        let n = break_even_workloads(train_a, wa, train_b, wb)?;
        return s.println(&format!("{} workloads", fixed(n, 1)));
    }
    let power_a = a.power_a.or(a_tr.map(|r| r.avg_power_w)).expect("checked");
    let power_b = a.power_b.or(b_tr.map(|r| r.avg_power_w)).expect("checked");
    let result = break_even(train_a, power_a, train_b, power_b)?;
    s.note(&format!("assumes {}", result.assumption_note));
    s.println(&result.to_string())
}

fn annual_estimate(a: &AnnualArgs, s: &mut Session) -> Result<(AnnualEstimate, IntensityRegistry), Failure> {
    if a.id.is_none() && a.region.is_none() {
        return Err(Failure::Usage("--region is required with --power".into()));
    }
    let cfg = s.config()?;
    let (power_w, region) = match (&a.id, a.power) {
        (Some(id), _) => {
            let rec = stored(&s.store(&cfg)?, id)?;
            let w = match a.scale_gpus {
                Some(n) => rec.avg_power_w * n as f64,
                None => rec.workstation_power_w(),
            };
            (w, a.region.clone().unwrap_or(rec.region))
        }
        (None, Some(w)) => (w * a.scale_gpus.unwrap_or(1) as f64, a.region.clone().expect("checked")),
        (None, None) => unreachable!("clap requires --power or --id"),
    };
    let registry = cfg.intensities()?;
    let ctx = registry.context(&region, a.pue.unwrap_or(cfg.pue()))?;
    let est = annualize(power_w, a.utilization, &ctx)?;
    Ok((est, registry))
}

fn load_devices(d: &DeviceArgs) -> Result<Vec<DeviceProfile>, Failure> {
    match &d.devices {
        Some(path) => Ok(read_devices_csv(open(path)?)?),
        None => Ok(sample_devices()),
    }
}

fn emit_table(s: &mut Session, table: &Table, chart: Vec<ChartRow>, d: &DeviceArgs) -> Result<(), Failure> {
    if let Some(path) = &d.output {
        export_chart_data(&chart, path)?;
        s.note(&format!("chart data written to {}", path.display()));
    }
    let text = render_table(table, s.table_format());
    s.print(&text)
}

fn compare(a: CompareArgs, s: &mut Session) -> Result<(), Failure> {
    let devices = load_devices(&a.devices)?;
    let cfg = s.config()?;
    let store = s.store(&cfg)?;
    let records: Vec<RunRecord> = store.query(&a.filter.filter()).into_iter().cloned().collect();
    if records.is_empty() {
        s.note("note: no stored runs match; run `ecotrace fixtures` to load the bundled records");
    }
    let rows = power_comparison_rows(&records, &devices, a.ceiling);
    let chart = rows.iter().map(ChartRow::from).collect();
    emit_table(s, &Table::comparison(&rows), chart, &a.devices)
}

fn appliances(a: AppliancesArgs, s: &mut Session) -> Result<(), Failure> {
    let devices = load_devices(&a.devices)?;
    let (est, registry) = annual_estimate(&a.annual, s)?;
    let cfg = s.config()?;
    let region = match (&a.annual.region, &a.annual.id) {
        (Some(r), _) => r.clone(),
        (None, Some(id)) => stored(&s.store(&cfg)?, id)?.region,
        (None, None) => unreachable!("checked in annual_estimate"),
    };
    let ctx = registry.context(&region, a.annual.pue.unwrap_or(cfg.pue()))?;
    let cmp = appliance_equivalents(&est, &devices, &ctx)?;
    for (name, reason) in &cmp.skipped {
        s.note(&format!("skipped {name}: {reason}"));
    }
    if matches!(s.table_format(), Format::PlainText | Format::Markdown) {
        s.println(&format!("{est}\n"))?;
    }
    let chart = cmp.rows.iter().map(ChartRow::from).collect();
    emit_table(s, &Table::appliances(&cmp.rows), chart, &a.devices)
}

fn statement(a: StatementArgs, s: &mut Session) -> Result<(), Failure> {
    let cfg = s.config()?;
    let store = s.store(&cfg)?;
    let records: Vec<RunRecord> = store.query(&a.filter.filter()).into_iter().cloned().collect();
    let registry = cfg.intensities()?;
    let pue = a.pue.unwrap_or(cfg.pue());
    let st = carbon_statement(&records, |region| registry.context(region, pue))?;
    s.println(&st.to_string())
}

fn fixtures(a: FixturesArgs, s: &mut Session) -> Result<(), Failure> {
    let cfg = s.config()?;
    if a.list {
        let filter = a.filter.filter();
        let records: Vec<RunRecord> = fixture_records().into_iter().filter(|r| filter.matches(r)).collect();
        let registry = cfg.intensities()?;
        let pue = a.pue.unwrap_or(cfg.pue());
        let bundle = ReportBundle::from_records(
            "Bundled runs",
            &records,
            |region| registry.context(region, pue),
            s.table_format(),
        )?;
        let text = bundle.render()?;
        return s.print(&text);
    }
    let mut store = s.store(&cfg)?;
    let report = store.import_fixtures()?;
    s.println(&format!(
        "imported {} records into {} ({} flagged by the consistency audit)",
        report.imported,
        store.runs_path().display(),
        report.annotated
    ))?;
    if report.duplicates.is_empty() {
        Ok(())
    } else {
        Err(Failure::Data(format!(
            "{} records already present; store left unchanged for them",
            report.duplicates.len()
        )))
    }
}

fn intensity(a: IntensityArgs, s: &mut Session) -> Result<(), Failure> {
    let cfg = s.config()?;
    let registry = cfg.intensities()?;
    if a.list {
        let lines: Vec<String> = registry.iter().map(|i| i.to_string()).collect();
        return s.println(&lines.join("\n"));
    }
    let region = a.region.as_deref().expect("clap requires --list or --region");
    let Some(history) = &a.history else {
        let found = registry.lookup(region)?.to_string();
        return s.println(&found);
    };
    let rows = read_history_csv(open(history)?)?;
    let stats = intensity_stats(&history_for(&rows, region), region)?;
    s.note(&format!("provenance: {}", stats.provenance));
    if a.save {
        let path = s.home.join("config.toml");
        save_intensity(&path, &stats.region, stats.mean_g_per_kwh, stats.std_g_per_kwh)?;
        s.note(&format!("saved to {}", path.display()));
    }
    s.println(&stats.to_string())
}

fn save_intensity(path: &Path, region: &str, mean: f64, std: f64) -> Result<(), Failure> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(io_failure(path)(e)),
    };
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let section = doc
        .entry("intensity")
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(section) = section else {
        return Err(Failure::Data(format!("{}: `intensity` is not a table", path.display())));
    };
    let mut entry = toml::Table::new();
    entry.insert("mean".into(), toml::Value::Float(mean));
    entry.insert("std".into(), toml::Value::Float(std));
    section.insert(region.to_ascii_uppercase(), toml::Value::Table(entry));
    let out = toml::to_string(&doc).map_err(|e| Failure::Data(e.to_string()))?;
    Config::parse(&out).map_err(Failure::Data)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_failure(dir))?;
    }
    let tmp = path.with_extension("toml.tmp");
    fs::write(&tmp, out).map_err(io_failure(&tmp))?;
    fs::rename(&tmp, path).map_err(io_failure(path))
}
