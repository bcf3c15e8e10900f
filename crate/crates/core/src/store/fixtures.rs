//! Published training and translation runs: LSTM and Transformer models on a
//! 4 × GTX 1080Ti workstation (Ireland) and a 3 × Tesla P100 workstation
//! (Netherlands), plus quantized Transformer translation runs.

use crate::analytics::{Architecture, Phase, Precision, RunRecord};
use crate::carbon::EmissionEstimate;

/// A fixture record together with the emission printed beside it.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureRow {
    pub table: &'static str,
    pub record: RunRecord,
    pub printed_co2: EmissionEstimate,
}

/// `(elapsed_h, avg_power_w, kwh, co2_mean_kg, co2_std_kg)`
type Cells = (f64, f64, f64, f64, f64);

struct Line {
    arch: Architecture,
    precision: Precision,
    pair: &'static str,
    ti: Cells,
    p100: Cells,
    steps: Option<(u64, u64)>,
}

fn lines_train() -> Vec<Line> {
    use Architecture::{Lstm, Trans};
    let fp = Precision::FP32;
    vec![
        Line { arch: Lstm, precision: fp, pair: "EN-FR", ti: (25.08, 142.05, 14.07, 5.14, 1.73), p100: (18.83, 115.09, 6.33, 4.02, 0.32), steps: Some((160_000, 145_000)) },
        Line { arch: Lstm, precision: fp, pair: "EN-ES", ti: (28.41, 140.88, 15.79, 5.77, 1.94), p100: (16.66, 113.99, 5.54, 3.52, 0.28), steps: Some((180_000, 130_000)) },
        Line { arch: Lstm, precision: fp, pair: "FR-EN", ti: (23.51, 141.85, 13.15, 4.81, 1.62), p100: (13.95, 113.48, 4.63, 2.94, 0.24), steps: Some((145_000, 105_000)) },
        Line { arch: Lstm, precision: fp, pair: "ES-EN", ti: (24.38, 139.90, 13.44, 4.91, 1.65), p100: (19.21, 113.91, 6.37, 4.04, 0.32), steps: Some((145_000, 145_000)) },
        Line { arch: Trans, precision: fp, pair: "EN-FR", ti: (5.22, 176.70, 3.64, 1.33, 0.45), p100: (5.06, 153.47, 2.27, 1.44, 0.12), steps: Some((14_500, 11_000)) },
        Line { arch: Trans, precision: fp, pair: "EN-ES", ti: (6.60, 176.54, 4.60, 1.68, 0.56), p100: (6.06, 152.08, 2.69, 1.71, 0.14), steps: Some((19_500, 13_000)) },
        Line { arch: Trans, precision: fp, pair: "FR-EN", ti: (6.15, 176.64, 4.29, 1.56, 0.53), p100: (4.85, 151.43, 2.15, 1.37, 0.11), steps: Some((17_500, 11_000)) },
        Line { arch: Trans, precision: fp, pair: "ES-EN", ti: (6.36, 179.48, 4.50, 1.64, 0.55), p100: (6.20, 151.59, 2.74, 1.74, 0.14), steps: Some((19_000, 13_000)) },
    ]
}

fn lines_translate() -> Vec<Line> {
    use Architecture::{Lstm, Trans};
    let fp = Precision::FP32;
    vec![
        Line { arch: Lstm, precision: fp, pair: "EN-FR", ti: (1.52, 157.80, 0.22, 0.08, 0.03), p100: (1.84, 90.50, 0.16, 0.10, 0.01), steps: None },
        Line { arch: Lstm, precision: fp, pair: "EN-ES", ti: (1.38, 158.51, 0.20, 0.07, 0.02), p100: (1.69, 89.06, 0.15, 0.10, 0.01), steps: None },
        Line { arch: Lstm, precision: fp, pair: "FR-EN", ti: (1.34, 153.43, 0.19, 0.07, 0.02), p100: (1.79, 93.14, 0.16, 0.10, 0.01), steps: None },
        Line { arch: Lstm, precision: fp, pair: "ES-EN", ti: (1.48, 154.98, 0.21, 0.08, 0.03), p100: (1.62, 89.35, 0.14, 0.09, 0.01), steps: None },
        Line { arch: Trans, precision: fp, pair: "EN-FR", ti: (2.63, 188.75, 0.45, 0.16, 0.06), p100: (3.01, 104.52, 0.31, 0.20, 0.02), steps: None },
        Line { arch: Trans, precision: fp, pair: "EN-ES", ti: (2.48, 170.02, 0.38, 0.14, 0.05), p100: (2.80, 102.71, 0.28, 0.18, 0.01), steps: None },
        Line { arch: Trans, precision: fp, pair: "FR-EN", ti: (2.47, 193.34, 0.47, 0.17, 0.06), p100: (3.18, 100.93, 0.31, 0.20, 0.02), steps: None },
        Line { arch: Trans, precision: fp, pair: "ES-EN", ti: (2.45, 175.60, 0.42, 0.15, 0.05), p100: (2.69, 104.35, 0.28, 0.18, 0.01), steps: None },
    ]
}

fn lines_quantized() -> Vec<Line> {
    use Architecture::Trans;
    use Precision::{INT16, INT8};
    vec![
        Line { arch: Trans, precision: INT16, pair: "EN-FR", ti: (5.17, 130.61, 0.13, 0.05, 0.02), p100: (0.79, 81.54, 0.01, 0.01, 0.00), steps: None },
        Line { arch: Trans, precision: INT8, pair: "EN-FR", ti: (4.66, 115.99, 0.11, 0.04, 0.01), p100: (2.16, 49.06, 0.02, 0.01, 0.00), steps: None },
        Line { arch: Trans, precision: INT16, pair: "EN-ES", ti: (4.45, 158.96, 0.14, 0.05, 0.02), p100: (0.99, 65.40, 0.01, 0.01, 0.00), steps: None },
        Line { arch: Trans, precision: INT8, pair: "EN-ES", ti: (4.15, 124.40, 0.10, 0.04, 0.01), p100: (1.00, 68.01, 0.01, 0.01, 0.00), steps: None },
        Line { arch: Trans, precision: INT16, pair: "FR-EN", ti: (4.57, 139.38, 0.13, 0.05, 0.02), p100: (1.28, 67.57, 0.02, 0.01, 0.00), steps: None },
        Line { arch: Trans, precision: INT8, pair: "FR-EN", ti: (4.39, 107.87, 0.09, 0.03, 0.01), p100: (1.29, 68.39, 0.02, 0.01, 0.00), steps: None },
        Line { arch: Trans, precision: INT16, pair: "ES-EN", ti: (4.45, 131.66, 0.12, 0.04, 0.01), p100: (1.02, 68.33, 0.01, 0.01, 0.00), steps: None },
        Line { arch: Trans, precision: INT8, pair: "ES-EN", ti: (4.03, 117.48, 0.09, 0.03, 0.01), p100: (1.04, 67.25, 0.01, 0.01, 0.00), steps: None },
    ]
}

fn expand(table: &'static str, phase: Phase, lines: Vec<Line>, out: &mut Vec<FixtureRow>) {
    for line in lines {
        for (gpu, region, train_gpus, cells, steps) in [
            ("1080Ti", "IE", 4, line.ti, line.steps.map(|s| s.0)),
            ("P100", "NL", 3, line.p100, line.steps.map(|s| s.1)),
        ] {
            let (elapsed_h, avg_power_w, kwh, mean, std) = cells;
            let arch_name = line.arch.to_string();
            let variant = match line.precision {
                Precision::FP32 => arch_name.clone(),
                p => format!("{arch_name}-{p:?}"),
            };
            let phase_name = match phase {
                Phase::Train => "train",
                Phase::Translate => "translate",
            };
            let id = format!("{table}-{variant}-{}-{gpu}", line.pair).to_ascii_lowercase();
            let label = format!("{variant} {} {gpu} {phase_name}", line.pair);
            out.push(FixtureRow {
                table,
                record: RunRecord {
                    id,
                    label,
                    architecture: line.arch.clone(),
                    lang_pair: line.pair.to_string(),
                    phase,
                    precision: line.precision,
                    gpu_model: gpu.to_string(),
                    n_gpus: if phase == Phase::Train { train_gpus } else { 1 },
                    elapsed_h,
                    kwh,
                    avg_power_w,
                    region: region.to_string(),
                    steps,
                    audit: None,
                },
                printed_co2: EmissionEstimate {
                    mean_kg: mean,
                    std_kg: std,
                },
            });
        }
    }
}

/// All published runs with their printed emissions, in table order.
pub fn fixture_rows() -> Vec<FixtureRow> {
    let mut out = Vec::with_capacity(48);
    expand("t5", Phase::Train, lines_train(), &mut out);
    expand("t6", Phase::Translate, lines_translate(), &mut out);
    expand("t9", Phase::Translate, lines_quantized(), &mut out);
    out
}

pub fn fixture_records() -> Vec<RunRecord> {
    fixture_rows().into_iter().map(|r| r.record).collect()
}
