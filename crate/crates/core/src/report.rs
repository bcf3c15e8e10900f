//! Tables, chart data files and the carbon impact statement.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde_json::{json, Map, Number, Value};
use thiserror::Error;

use crate::analytics::{ApplianceRow, ComparisonRow, RunRecord};
use crate::carbon::{co2_emissions, CarbonContext, CarbonError, EmissionEstimate};
use crate::numfmt::{fixed, round_to};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("unsupported format {0:?} (expected md, csv, json or text)")]
    UnsupportedFormat(String),
    #[error("record set is empty")]
    EmptyRecordSet,
    #[error("chart data is empty")]
    EmptyChart,
    #[error("totals do not match the row sums: {0}")]
    TotalsMismatch(String),
    #[error(transparent)]
    Carbon(#[from] CarbonError),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("chart csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    Markdown,
    Csv,
    Json,
    #[default]
    PlainText,
}

impl FromStr for Format {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "md" | "markdown" => Ok(Format::Markdown),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "text" | "txt" | "plain" => Ok(Format::PlainText),
            _ => Err(ReportError::UnsupportedFormat(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Num { value: f64, dp: usize },
    Estimate(EmissionEstimate),
}

impl Cell {
    pub fn num(value: f64, dp: usize) -> Self {
        Cell::Num { value, dp }
    }

    fn display(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Num { value, dp } => fixed(*value, *dp),
            Cell::Estimate(e) => e.to_string(),
        }
    }

    fn json(&self) -> Value {
        fn number(x: f64, dp: usize) -> Value {
            Number::from_f64(round_to(x, dp)).map_or(Value::Null, Value::Number)
        }
        match self {
            Cell::Text(s) => Value::String(s.clone()),
            Cell::Num { value, dp } => number(*value, *dp),
            Cell::Estimate(e) => json!({ "mean_kg": number(e.mean_kg, 2), "std_kg": number(e.std_kg, 2) }),
        }
    }

    fn is_numeric(&self) -> bool {
        !matches!(self, Cell::Text(_))
    }
}

/// Column headers plus rows of cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

/// Canonical record table columns.
pub const RECORD_COLUMNS: [&str; 5] = ["id", "elapsed_h", "avg_power_w", "kwh", "co2_kg"];

impl Table {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        Table {
            headers: headers.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn records(rows: &[RecordRow]) -> Self {
        let mut t = Table::new(RECORD_COLUMNS);
        t.rows = rows
            .iter()
            .map(|r| {
                vec![
                    Cell::Text(r.id.clone()),
                    Cell::num(r.elapsed_h, 2),
                    Cell::num(r.avg_power_w, 2),
                    Cell::num(r.kwh, 2),
                    Cell::Estimate(r.emission),
                ]
            })
            .collect();
        t
    }

    pub fn comparison(rows: &[ComparisonRow]) -> Self {
        let mut t = Table::new(["name", "power_w", "kind"]);
        t.rows = rows
            .iter()
            .map(|r| {
                vec![
                    Cell::Text(r.name.clone()),
                    Cell::num(r.power_w, 2),
                    Cell::Text(r.kind.as_str().into()),
                ]
            })
            .collect();
        t
    }

    pub fn appliances(rows: &[ApplianceRow]) -> Self {
        let mut t = Table::new(["name", "annual_kg", "ratio"]);
        t.rows = rows
            .iter()
            .map(|r| {
                vec![
                    Cell::Text(r.name.clone()),
                    Cell::num(r.annual_kg, 2),
                    Cell::num(r.ratio, 2),
                ]
            })
            .collect();
        t
    }
}

fn md_escape(s: &str) -> String {
    s.replace('|', "\\|")
}

/// Renders a table. Output depends only on the table contents.
pub fn render_table(table: &Table, format: Format) -> String {
    match format {
        Format::Markdown => {
            let mut out = String::new();
            out.push_str("| ");
            out.push_str(&table.headers.iter().map(|h| md_escape(h)).collect::<Vec<_>>().join(" | "));
            out.push_str(" |\n|");
            for i in 0..table.headers.len() {
                let numeric = table.rows.first().is_some_and(|r| r.get(i).is_some_and(Cell::is_numeric));
                out.push_str(if numeric { "---:|" } else { "---|" });
            }
            out.push('\n');
            for row in &table.rows {
                out.push_str("| ");
                out.push_str(&row.iter().map(|c| md_escape(&c.display())).collect::<Vec<_>>().join(" | "));
                out.push_str(" |\n");
            }
            out
        }
        Format::Csv => {
            let mut wtr = csv::Writer::from_writer(Vec::new());
            wtr.write_record(&table.headers).expect("in-memory write");
            for row in &table.rows {
                wtr.write_record(row.iter().map(Cell::display)).expect("in-memory write");
            }
            String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("utf-8")
        }
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&json_rows(table)).expect("json");
            s.push('\n');
            s
        }
        Format::PlainText => {
            let cells: Vec<Vec<String>> = table.rows.iter().map(|r| r.iter().map(Cell::display).collect()).collect();
            let widths: Vec<usize> = (0..table.headers.len())
                .map(|i| {
                    cells
                        .iter()
                        .filter_map(|r| r.get(i))
                        .map(|c| c.chars().count())
                        .chain([table.headers[i].chars().count()])
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let numeric: Vec<bool> = (0..table.headers.len())
                .map(|i| table.rows.first().is_some_and(|r| r.get(i).is_some_and(Cell::is_numeric)))
                .collect();
            let line = |values: Vec<String>| -> String {
                let parts: Vec<String> = values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let pad = widths[i].saturating_sub(v.chars().count());
                        if numeric[i] {
                            format!("{}{v}", " ".repeat(pad))
                        } else {
                            format!("{v}{}", " ".repeat(pad))
                        }
                    })
                    .collect();
                format!("{}\n", parts.join("  ").trim_end())
            };
            let mut out = line(table.headers.clone());
            for r in cells {
                out.push_str(&line(r));
            }
            out
        }
    }
}

fn json_rows(table: &Table) -> Value {
    Value::Array(
        table
            .rows
            .iter()
            .map(|row| {
                let mut obj = Map::new();
                for (h, c) in table.headers.iter().zip(row) {
                    obj.insert(h.clone(), c.json());
                }
                Value::Object(obj)
            })
            .collect(),
    )
}

/// One rendered run with its emission.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordRow {
    pub id: String,
    pub elapsed_h: f64,
    pub avg_power_w: f64,
    pub kwh: f64,
    pub emission: EmissionEstimate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Totals {
    pub kwh: f64,
    pub emission: EmissionEstimate,
}

/// A titled record table with totals.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub title: String,
    pub rows: Vec<RecordRow>,
    pub totals: Totals,
    pub format: Format,
}

fn sum_rows(rows: &[RecordRow]) -> Totals {
    Totals {
        kwh: rows.iter().map(|r| r.kwh).sum(),
        emission: rows.iter().map(|r| r.emission).sum(),
    }
}

impl ReportBundle {
    pub fn from_records<F>(title: impl Into<String>, records: &[RunRecord], contexts: F, format: Format) -> Result<Self, ReportError>
    where
        F: Fn(&str) -> Result<CarbonContext, CarbonError>,
    {
        let rows = records
            .iter()
            .map(|r| {
                Ok(RecordRow {
                    id: r.id.clone(),
                    elapsed_h: r.elapsed_h,
                    avg_power_w: r.avg_power_w,
                    kwh: r.kwh,
                    emission: co2_emissions(r.kwh, &contexts(&r.region)?)?,
                })
            })
            .collect::<Result<Vec<_>, ReportError>>()?;
        let totals = sum_rows(&rows);
        Ok(ReportBundle { title: title.into(), rows, totals, format })
    }

    fn verify_totals(&self) -> Result<(), ReportError> {
        let actual = sum_rows(&self.rows);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        if close(actual.kwh, self.totals.kwh)
            && close(actual.emission.mean_kg, self.totals.emission.mean_kg)
            && close(actual.emission.std_kg, self.totals.emission.std_kg)
        {
            Ok(())
        } else {
            Err(ReportError::TotalsMismatch(format!(
                "rows sum to {} kWh / {} kg, totals say {} kWh / {} kg",
                actual.kwh, actual.emission, self.totals.kwh, self.totals.emission
            )))
        }
    }

    pub fn render(&self) -> Result<String, ReportError> {
        self.verify_totals()?;
        let table = Table::records(&self.rows);
        let total_line = format!(
            "{} kWh, {} kg CO2eq",
            fixed(self.totals.kwh, 2),
            self.totals.emission
        );
        Ok(match self.format {
            Format::Markdown => format!(
                "## {}\n\n{}\n**Total:** {total_line}\n",
                self.title,
                render_table(&table, Format::Markdown)
            ),
            Format::Csv => render_table(&table, Format::Csv),
            Format::Json => {
                let mut obj = Map::new();
                obj.insert("title".into(), Value::String(self.title.clone()));
                obj.insert("rows".into(), json_rows(&table));
                obj.insert(
                    "totals".into(),
                    json!({
                        "kwh": Cell::num(self.totals.kwh, 2).json(),
                        "co2_kg": Cell::Estimate(self.totals.emission).json(),
                    }),
                );
                let mut s = serde_json::to_string_pretty(&Value::Object(obj)).expect("json");
                s.push('\n');
                s
            }
            Format::PlainText => format!(
                "{}\n\n{}\nTotal: {total_line}\n",
                self.title,
                render_table(&table, Format::PlainText)
            ),
        })
    }
}

/// Aggregate disclosure of energy and emissions over a set of runs.
#[derive(Debug, Clone, PartialEq)]
pub struct CarbonStatement {
    pub kwh: f64,
    pub emission: EmissionEstimate,
    /// Per-region subtotals: `(kwh, emission)`.
    pub by_region: BTreeMap<String, (f64, EmissionEstimate)>,
}

impl CarbonStatement {
    pub fn sentence(&self) -> String {
        format!(
            "This work contributed {} ± {} kg of CO2eq to the atmosphere and used {} kWh of electricity.",
            fixed(self.emission.mean_kg, 2),
            fixed(self.emission.std_kg, 2),
            fixed(self.kwh, 2)
        )
    }

    pub fn footnote(&self) -> String {
        let regions: Vec<&str> = self.by_region.keys().map(String::as_str).collect();
        format!(
            "Uncertainty: per-run standard deviations summed linearly within and across regions ({}); PUE treated as exact.",
            regions.join(", ")
        )
    }
}

impl fmt::Display for CarbonStatement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.sentence())?;
        write!(f, "{}", self.footnote())
    }
}

/// Sums energy and per-run emissions; rounding happens only when formatting.
pub fn carbon_statement<F>(records: &[RunRecord], contexts: F) -> Result<CarbonStatement, ReportError>
where
    F: Fn(&str) -> Result<CarbonContext, CarbonError>,
{
    if records.is_empty() {
        return Err(ReportError::EmptyRecordSet);
    }
    let mut by_region: BTreeMap<String, (f64, EmissionEstimate)> = BTreeMap::new();
    for r in records {
        let e = co2_emissions(r.kwh, &contexts(&r.region)?)?;
        let slot = by_region.entry(r.region.to_ascii_uppercase()).or_default();
        slot.0 += r.kwh;
        slot.1 = slot.1 + e;
    }
    Ok(CarbonStatement {
        kwh: by_region.values().map(|v| v.0).sum(),
        emission: by_region.values().map(|v| v.1).sum(),
        by_region,
    })
}

/// One bar of an exported chart.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartRow {
    pub name: String,
    pub value: f64,
    pub kind: String,
}

impl From<&ComparisonRow> for ChartRow {
    fn from(r: &ComparisonRow) -> Self {
        ChartRow { name: r.name.clone(), value: r.power_w, kind: r.kind.as_str().into() }
    }
}

impl From<&ApplianceRow> for ChartRow {
    fn from(r: &ApplianceRow) -> Self {
        ChartRow { name: r.name.clone(), value: r.annual_kg, kind: "device".into() }
    }
}

/// Writes `name,value,kind` rows in the order given.
pub fn write_chart_data<W: Write>(writer: W, rows: &[ChartRow]) -> Result<(), ReportError> {
    if rows.is_empty() {
        return Err(ReportError::EmptyChart);
    }
    let csv_err = |e: csv::Error| ReportError::Csv(e.to_string());
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["name", "value", "kind"]).map_err(csv_err)?;
    for r in rows {
        wtr.write_record([r.name.as_str(), &r.value.to_string(), r.kind.as_str()]).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| ReportError::Csv(e.to_string()))
}

pub fn export_chart_data(rows: &[ChartRow], path: &Path) -> Result<(), ReportError> {
    let io = |e: std::io::Error| ReportError::Io { path: path.display().to_string(), reason: e.to_string() };
    if rows.is_empty() {
        return Err(ReportError::EmptyChart);
    }
    let mut buf = Vec::new();
    write_chart_data(&mut buf, rows)?;
    let mut f = File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)?;
    Ok(())
}

pub fn read_chart_data<R: Read>(reader: R) -> Result<Vec<ChartRow>, ReportError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| ReportError::Csv(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["name", "value", "kind"] {
        return Err(ReportError::Csv("expected header name,value,kind".into()));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(|e| ReportError::Csv(e.to_string()))?;
            let value = rec[1]
                .parse()
                .map_err(|_| ReportError::Csv(format!("bad value {:?}", &rec[1])))?;
            Ok(ChartRow { name: rec[0].to_string(), value, kind: rec[2].to_string() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::Phase;
    use crate::carbon::{CarbonIntensity, IntensityRegistry, DEFAULT_PUE};
    use crate::store::fixture_records;

    fn home_contexts(region: &str) -> Result<CarbonContext, CarbonError> {
        IntensityRegistry::builtin().context(region, DEFAULT_PUE)
    }

    #[test]
    fn format_names() {
        assert_eq!("md".parse::<Format>().unwrap(), Format::Markdown);
        assert_eq!("JSON".parse::<Format>().unwrap(), Format::Json);
        assert!(matches!("xml".parse::<Format>(), Err(ReportError::UnsupportedFormat(_))));
    }

    #[test]
    fn unit_statement() {
        let mut r = fixture_records().remove(0);
        r.kwh = 1.0;
        r.region = "ZZ".into();
        let unit = |_: &str| CarbonContext::new(1.0, CarbonIntensity::new("ZZ", 1000.0, 0.0, "unit").unwrap());
        let s = carbon_statement(&[r], unit).unwrap();
        assert_eq!(
            s.sentence(),
            "This work contributed 1.00 ± 0.00 kg of CO2eq to the atmosphere and used 1.00 kWh of electricity."
        );
        assert!(matches!(carbon_statement(&[], unit), Err(ReportError::EmptyRecordSet)));
    }

    #[test]
    fn statement_equals_sum_of_record_emissions() {
        let recs = fixture_records();
        let s = carbon_statement(&recs, home_contexts).unwrap();
        let mut by_region: BTreeMap<String, EmissionEstimate> = BTreeMap::new();
        for r in &recs {
            let e = co2_emissions(r.kwh, &home_contexts(&r.region).unwrap()).unwrap();
            let slot = by_region.entry(r.region.clone()).or_default();
            *slot = *slot + e;
        }
        let expect: EmissionEstimate = by_region.values().copied().sum();
        assert_eq!(s.emission, expect);
        assert!(s.sentence().contains("111.55 kWh"));
    }

    #[test]
    fn train_records_markdown() {
        let train: Vec<_> = fixture_records().into_iter().filter(|r| r.phase == Phase::Train).collect();
        let table = Table::records(
            &ReportBundle::from_records("t", &train, home_contexts, Format::Markdown).unwrap().rows,
        );
        let md = render_table(&table, Format::Markdown);
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines[0], "| id | elapsed_h | avg_power_w | kwh | co2_kg |");
        assert_eq!(lines.len(), 2 + 16);
        assert_eq!(lines[2], "| t5-lstm-en-fr-1080ti | 25.08 | 142.05 | 14.07 | 5.14 ± 1.73 |");
    }

    #[test]
    fn empty_csv_is_header_only() {
        let b = ReportBundle::from_records("empty", &[], home_contexts, Format::Csv).unwrap();
        assert_eq!(b.render().unwrap(), "id,elapsed_h,avg_power_w,kwh,co2_kg\n");
    }

    #[test]
    fn totals_mismatch_is_an_error() {
        let mut b = ReportBundle::from_records("x", &fixture_records(), home_contexts, Format::PlainText).unwrap();
        b.totals.kwh += 1.0;
        assert!(matches!(b.render(), Err(ReportError::TotalsMismatch(_))));
    }

    #[test]
    fn renders_are_deterministic() {
        let recs = fixture_records();
        for f in [Format::Markdown, Format::Csv, Format::Json, Format::PlainText] {
            let a = ReportBundle::from_records("all", &recs, home_contexts, f).unwrap().render().unwrap();
            let b = ReportBundle::from_records("all", &recs, home_contexts, f).unwrap().render().unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn json_keeps_column_order() {
        let recs = &fixture_records()[..1];
        let out = ReportBundle::from_records("one", recs, home_contexts, Format::Json).unwrap().render().unwrap();
        let id = out.find("\"id\"").unwrap();
        let kwh = out.find("\"kwh\"").unwrap();
        let co2 = out.find("\"co2_kg\"").unwrap();
        assert!(id < kwh && kwh < co2);
        let v: Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["rows"][0]["co2_kg"]["mean_kg"], json!(5.14));
    }

    #[test]
    fn csv_quotes_embedded_commas() {
        let mut t = Table::new(["name", "power_w", "kind"]);
        t.rows.push(vec![Cell::Text("fridge, large".into()), Cell::num(150.0, 2), Cell::Text("device".into())]);
        assert_eq!(render_table(&t, Format::Csv), "name,power_w,kind\n\"fridge, large\",150.00,device\n");
    }

    #[test]
    fn chart_export_round_trips() {
        let rows = vec![
            ChartRow { name: "LSTM EN-FR 1080Ti train".into(), value: 142.05, kind: "model".into() },
            ChartRow { name: "microwave, small".into(), value: 1100.0, kind: "device".into() },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.csv");
        export_chart_data(&rows, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        export_chart_data(&rows, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        assert_eq!(String::from_utf8_lossy(&first).lines().count(), 3);
        assert_eq!(read_chart_data(first.as_slice()).unwrap(), rows);
        assert!(matches!(export_chart_data(&[], &path), Err(ReportError::EmptyChart)));
    }
}
