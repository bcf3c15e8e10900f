//! Per-GPU power traces, 1 Hz reconstruction and energy integration.

mod csv_io;

pub use csv_io::{read_trace_csv, write_trace_csv, TraceCsvWriter};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::telemetry::{PowerSample, TimestampOrigin};

/// Watt-seconds per kilowatt-hour.
pub const JOULES_PER_KWH: f64 = 3_600_000.0;

pub const DEFAULT_GAP_FACTOR: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("trace for gpu {gpu_index} has {count} sample(s); at least 2 are required")]
    TooFewSamples { gpu_index: u32, count: usize },
    #[error("trace for gpu {gpu_index} spans no whole second")]
    EmptyGrid { gpu_index: u32 },
    #[error("timestamps for gpu {gpu_index} are not strictly increasing at {at_s} s")]
    NonMonotonic { gpu_index: u32, at_s: f64 },
    #[error("invalid reading for gpu {gpu_index} at {at_s} s: {reason}")]
    InvalidReading {
        gpu_index: u32,
        at_s: f64,
        reason: &'static str,
    },
    #[error("trace for gpu {gpu_index} is not on a 1 Hz grid; resample first")]
    NotUniform { gpu_index: u32 },
    #[error("trace set is empty")]
    EmptyTraceSet,
    #[error("nominal interval must be positive, got {0}")]
    InvalidInterval(f64),
    #[error("gpu {gpu_index} appears twice in the trace set")]
    DuplicateGpu { gpu_index: u32 },
    #[error("trace csv: {0}")]
    Csv(String),
}

/// Ordered `(timestamp_s, power_w)` series for one GPU.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerTrace {
    gpu_index: u32,
    samples: Vec<(f64, f64)>,
    uniform_1hz: bool,
}

impl PowerTrace {
    pub fn new(gpu_index: u32, samples: Vec<(f64, f64)>) -> Result<Self, TraceError> {
        for (i, &(t, p)) in samples.iter().enumerate() {
            if !t.is_finite() {
                return Err(TraceError::InvalidReading { gpu_index, at_s: t, reason: "non-finite timestamp" });
            }
            if !p.is_finite() || p < 0.0 {
                return Err(TraceError::InvalidReading { gpu_index, at_s: t, reason: "power must be finite and non-negative" });
            }
            if i > 0 && t <= samples[i - 1].0 {
                return Err(TraceError::NonMonotonic { gpu_index, at_s: t });
            }
        }
        let uniform_1hz = is_unit_grid(&samples);
        Ok(PowerTrace { gpu_index, samples, uniform_1hz })
    }

    /// Builds a 1 Hz trace starting at integer second `start_s`.
    pub fn uniform(gpu_index: u32, start_s: i64, powers: impl IntoIterator<Item = f64>) -> Result<Self, TraceError> {
        let samples = powers
            .into_iter()
            .enumerate()
            .map(|(i, p)| ((start_s + i as i64) as f64, p))
            .collect();
        Self::new(gpu_index, samples)
    }

    pub fn gpu_index(&self) -> u32 {
        self.gpu_index
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_uniform_1hz(&self) -> bool {
        self.uniform_1hz
    }

    pub fn first_s(&self) -> Option<f64> {
        self.samples.first().map(|s| s.0)
    }

    pub fn last_s(&self) -> Option<f64> {
        self.samples.last().map(|s| s.0)
    }

    /// Samples with `from_s <= t < to_s`.
    pub fn slice(&self, from_s: f64, to_s: f64) -> PowerTrace {
        let samples: Vec<_> = self
            .samples
            .iter()
            .copied()
            .filter(|&(t, _)| t >= from_s && t < to_s)
            .collect();
        let uniform_1hz = is_unit_grid(&samples);
        PowerTrace { gpu_index: self.gpu_index, samples, uniform_1hz }
    }
}

/// Integer timestamps spaced exactly one second apart.
fn is_unit_grid(samples: &[(f64, f64)]) -> bool {
    samples.iter().all(|&(t, _)| t.fract() == 0.0)
        && samples.windows(2).all(|w| w[1].0 - w[0].0 == 1.0)
}

/// Linearly interpolates a trace onto every whole second in
/// `[ceil(first), floor(last)]`. Readings that already fall on the grid are
/// copied unchanged; nothing is extrapolated.
pub fn resample_1hz(trace: &PowerTrace) -> Result<PowerTrace, TraceError> {
    let gpu_index = trace.gpu_index;
    let samples = &trace.samples;
    if samples.len() < 2 {
        return Err(TraceError::TooFewSamples { gpu_index, count: samples.len() });
    }
    if trace.uniform_1hz {
        return Ok(trace.clone());
    }
    let first = samples[0].0.ceil() as i64;
    let last = samples[samples.len() - 1].0.floor() as i64;
    if first > last {
        return Err(TraceError::EmptyGrid { gpu_index });
    }

    let mut out = Vec::with_capacity((last - first + 1) as usize);
    let mut j = 0usize;
    for sec in first..=last {
        let t = sec as f64;
        while j + 1 < samples.len() && samples[j + 1].0 <= t {
            j += 1;
        }
        let (t0, p0) = samples[j];
        let value = if t0 == t || j + 1 == samples.len() {
            p0
        } else {
            let (t1, p1) = samples[j + 1];
            p0 + (p1 - p0) * (t - t0) / (t1 - t0)
        };
        out.push((t, value));
    }
    Ok(PowerTrace { gpu_index, samples: out, uniform_1hz: true })
}

/// A gap between consecutive readings longer than the allowed spacing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gap {
    pub start_s: f64,
    pub end_s: f64,
}

impl Gap {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Reports spans where consecutive timestamps differ by more than
/// `factor × nominal_interval_s`.
pub fn detect_gaps(trace: &PowerTrace, nominal_interval_s: f64, factor: f64) -> Vec<Gap> {
    let limit = factor * nominal_interval_s;
    trace
        .samples
        .windows(2)
        .filter(|w| w[1].0 - w[0].0 > limit)
        .map(|w| Gap { start_s: w[0].0, end_s: w[1].0 })
        .collect()
}

/// Per-second summation used for the energy total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnergyRule {
    /// Each 1 Hz reading contributes one second at its wattage.
    #[default]
    Rectangle,
    /// Trapezoids between neighbouring 1 Hz readings. Differs from
    /// `Rectangle` by at most one interval over the trace duration.
    Trapezoid,
}

/// Which readings were integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pipeline {
    /// Traces resampled onto a 1 Hz grid, then summed per second.
    #[default]
    Interpolated,
    /// Raw readings, each weighted by the nominal interval.
    Raw,
}

impl Pipeline {
    pub fn label(self) -> &'static str {
        match self {
            Pipeline::Interpolated => "interpolated-1hz",
            Pipeline::Raw => "raw",
        }
    }
}

/// Workstation-level group of traces sharing one clock.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    traces: BTreeMap<u32, PowerTrace>,
    pub workstation_label: String,
    nominal_interval_s: f64,
    pub timestamp_origin: TimestampOrigin,
}

impl TraceSet {
    pub fn new(label: impl Into<String>, nominal_interval_s: f64) -> Result<Self, TraceError> {
        if !(nominal_interval_s > 0.0 && nominal_interval_s.is_finite()) {
            return Err(TraceError::InvalidInterval(nominal_interval_s));
        }
        Ok(TraceSet {
            traces: BTreeMap::new(),
            workstation_label: label.into(),
            nominal_interval_s,
            timestamp_origin: TimestampOrigin::Recorded,
        })
    }

    pub fn with_trace(mut self, trace: PowerTrace) -> Result<Self, TraceError> {
        self.insert(trace)?;
        Ok(self)
    }

    pub fn insert(&mut self, trace: PowerTrace) -> Result<(), TraceError> {
        let gpu_index = trace.gpu_index;
        if self.traces.contains_key(&gpu_index) {
            return Err(TraceError::DuplicateGpu { gpu_index });
        }
        self.traces.insert(gpu_index, trace);
        Ok(())
    }

    /// Groups samples by GPU; samples of each GPU must arrive in time order.
    pub fn from_samples(
        label: impl Into<String>,
        nominal_interval_s: f64,
        samples: &[PowerSample],
    ) -> Result<Self, TraceError> {
        let mut grouped: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
        for s in samples {
            grouped.entry(s.gpu_index).or_default().push((s.timestamp_s, s.power_w));
        }
        let mut set = TraceSet::new(label, nominal_interval_s)?;
        for (gpu, series) in grouped {
            set.insert(PowerTrace::new(gpu, series)?)?;
        }
        Ok(set)
    }

    pub fn nominal_interval_s(&self) -> f64 {
        self.nominal_interval_s
    }

    pub fn traces(&self) -> impl Iterator<Item = &PowerTrace> {
        self.traces.values()
    }

    pub fn get(&self, gpu_index: u32) -> Option<&PowerTrace> {
        self.traces.get(&gpu_index)
    }

    pub fn gpu_count(&self) -> usize {
        self.traces.len()
    }

    pub fn reading_count(&self) -> usize {
        self.traces.values().map(PowerTrace::len).sum()
    }

    pub fn is_uniform_1hz(&self) -> bool {
        self.traces.values().all(PowerTrace::is_uniform_1hz)
    }

    pub fn resampled(&self) -> Result<TraceSet, TraceError> {
        let traces = self
            .traces
            .iter()
            .map(|(&gpu, t)| resample_1hz(t).map(|r| (gpu, r)))
            .collect::<Result<_, _>>()?;
        Ok(TraceSet { traces, ..self.clone_meta() })
    }

    /// Restricts every trace to `from_s <= t < to_s`.
    pub fn slice(&self, from_s: f64, to_s: f64) -> TraceSet {
        let traces = self
            .traces
            .iter()
            .map(|(&gpu, t)| (gpu, t.slice(from_s, to_s)))
            .collect();
        TraceSet { traces, ..self.clone_meta() }
    }

    fn clone_meta(&self) -> TraceSet {
        TraceSet {
            traces: BTreeMap::new(),
            workstation_label: self.workstation_label.clone(),
            nominal_interval_s: self.nominal_interval_s,
            timestamp_origin: self.timestamp_origin,
        }
    }

    /// Gaps of every trace, tagged with their GPU.
    pub fn gaps(&self, factor: f64) -> Vec<(u32, Gap)> {
        self.traces
            .iter()
            .flat_map(|(&gpu, t)| {
                detect_gaps(t, self.nominal_interval_s, factor)
                    .into_iter()
                    .map(move |g| (gpu, g))
            })
            .collect()
    }

    /// End-to-end energy computation with gap warnings attached.
    pub fn energy(&self, pipeline: Pipeline, rule: EnergyRule, gap_factor: f64) -> Result<EnergySummary, TraceError> {
        if self.traces.is_empty() {
            return Err(TraceError::EmptyTraceSet);
        }
        let gaps = self.gaps(gap_factor);
        let kwh = match pipeline {
            Pipeline::Interpolated => integrate_kwh_with(&self.resampled()?, rule)?,
            Pipeline::Raw => {
                let total: f64 = self
                    .traces
                    .values()
                    .flat_map(|t| t.samples.iter().map(|s| s.1))
                    .sum();
                total * self.nominal_interval_s / JOULES_PER_KWH
            }
        };
        Ok(EnergySummary {
            kwh,
            total_gap_s: gaps.iter().map(|(_, g)| g.duration_s()).sum(),
            gaps,
            pipeline,
            rule,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergySummary {
    pub kwh: f64,
    pub gaps: Vec<(u32, Gap)>,
    pub total_gap_s: f64,
    pub pipeline: Pipeline,
    pub rule: EnergyRule,
}

/// Sum of per-second readings across all GPUs, in kWh.
pub fn integrate_kwh(set: &TraceSet) -> Result<f64, TraceError> {
    integrate_kwh_with(set, EnergyRule::Rectangle)
}

pub fn integrate_kwh_with(set: &TraceSet, rule: EnergyRule) -> Result<f64, TraceError> {
    if set.traces.is_empty() {
        return Err(TraceError::EmptyTraceSet);
    }
    let mut watt_seconds = 0.0;
    for trace in set.traces.values() {
        if !trace.uniform_1hz {
            return Err(TraceError::NotUniform { gpu_index: trace.gpu_index });
        }
        watt_seconds += match rule {
            EnergyRule::Rectangle => trace.samples.iter().map(|s| s.1).sum::<f64>(),
            EnergyRule::Trapezoid => trace
                .samples
                .windows(2)
                .map(|w| 0.5 * (w[0].1 + w[1].1))
                .sum::<f64>(),
        };
    }
    Ok(watt_seconds / JOULES_PER_KWH)
}

/// Mean over every reading of every GPU. Not scaled by GPU count.
pub fn average_power(set: &TraceSet) -> Result<f64, TraceError> {
    let count = set.reading_count();
    if count == 0 {
        return Err(TraceError::EmptyTraceSet);
    }
    let total: f64 = set
        .traces
        .values()
        .flat_map(|t| t.samples.iter().map(|s| s.1))
        .sum();
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(gpu: u32, pts: &[(f64, f64)]) -> PowerTrace {
        PowerTrace::new(gpu, pts.to_vec()).unwrap()
    }

    fn set_of(traces: Vec<PowerTrace>) -> TraceSet {
        traces
            .into_iter()
            .try_fold(TraceSet::new("test", 1.0).unwrap(), TraceSet::with_trace)
            .unwrap()
    }

    #[test]
    fn constant_signal_resamples_flat() {
        let r = resample_1hz(&trace(0, &[(0.0, 100.0), (5.0, 100.0)])).unwrap();
        assert!(r.is_uniform_1hz());
        assert_eq!(r.len(), 6);
        assert!(r.samples().iter().all(|s| s.1 == 100.0));
    }

    #[test]
    fn linear_ramp_resamples_exactly() {
        let r = resample_1hz(&trace(0, &[(0.0, 100.0), (5.0, 150.0)])).unwrap();
        let values: Vec<f64> = r.samples().iter().map(|s| s.1).collect();
        assert_eq!(values, vec![100.0, 110.0, 120.0, 130.0, 140.0, 150.0]);
        let times: Vec<f64> = r.samples().iter().map(|s| s.0).collect();
        assert_eq!(times, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn grid_is_anchored_inside_span() {
        let r = resample_1hz(&trace(0, &[(0.5, 100.0), (3.5, 130.0)])).unwrap();
        let times: Vec<f64> = r.samples().iter().map(|s| s.0).collect();
        assert_eq!(times, vec![1.0, 2.0, 3.0]);
        assert!((r.samples()[0].1 - 105.0).abs() < 1e-12);
    }

    #[test]
    fn resample_errors() {
        assert_eq!(
            resample_1hz(&trace(2, &[(0.0, 1.0)])),
            Err(TraceError::TooFewSamples { gpu_index: 2, count: 1 })
        );
        assert_eq!(
            resample_1hz(&trace(0, &[(0.2, 1.0), (0.7, 1.0)])),
            Err(TraceError::EmptyGrid { gpu_index: 0 })
        );
    }

    #[test]
    fn trace_rejects_disorder_and_negative_power() {
        assert!(matches!(
            PowerTrace::new(0, vec![(1.0, 1.0), (1.0, 2.0)]),
            Err(TraceError::NonMonotonic { .. })
        ));
        assert!(matches!(
            PowerTrace::new(0, vec![(1.0, -1.0)]),
            Err(TraceError::InvalidReading { .. })
        ));
    }

    #[test]
    fn one_hour_at_100w_is_a_tenth_kwh() {
        let set = set_of(vec![PowerTrace::uniform(0, 0, vec![100.0; 3600]).unwrap()]);
        assert_eq!(integrate_kwh(&set).unwrap(), 0.1);
    }

    #[test]
    fn constant_draw_reconstruction_is_close_to_reported_table_energy() {
        // 4 GPUs at 142.05 W for 25.08 h against a reported 14.07 kWh.
        let seconds = (25.08f64 * 3600.0).round() as usize;
        let traces = (0..4)
            .map(|g| PowerTrace::uniform(g, 0, vec![142.05; seconds]).unwrap())
            .collect();
        let kwh = integrate_kwh(&set_of(traces)).unwrap();
        assert!((kwh - 14.2505).abs() < 1e-4, "{kwh}");
        assert!((kwh - 14.07).abs() / 14.07 < 0.015);
    }

    #[test]
    fn integrate_requires_uniform() {
        let set = set_of(vec![trace(0, &[(0.0, 1.0), (5.0, 1.0)])]);
        assert_eq!(integrate_kwh(&set), Err(TraceError::NotUniform { gpu_index: 0 }));
        assert_eq!(
            integrate_kwh(&TraceSet::new("x", 1.0).unwrap()),
            Err(TraceError::EmptyTraceSet)
        );
    }

    #[test]
    fn average_power_is_per_reading_mean() {
        let set = set_of(vec![
            PowerTrace::uniform(0, 0, vec![100.0; 10]).unwrap(),
            PowerTrace::uniform(1, 0, vec![200.0; 10]).unwrap(),
        ]);
        assert_eq!(average_power(&set).unwrap(), 150.0);

        let single = set_of(vec![PowerTrace::uniform(0, 0, vec![157.80; 50]).unwrap()]);
        assert!((average_power(&single).unwrap() - 157.80).abs() < 1e-9);

        let unequal = set_of(vec![
            PowerTrace::uniform(0, 0, vec![100.0; 3]).unwrap(),
            PowerTrace::uniform(1, 0, vec![200.0; 1]).unwrap(),
        ]);
        assert_eq!(average_power(&unequal).unwrap(), 125.0);

        assert_eq!(
            average_power(&TraceSet::new("x", 1.0).unwrap()),
            Err(TraceError::EmptyTraceSet)
        );
    }

    #[test]
    fn gaps_on_regular_and_holed_traces() {
        let regular = PowerTrace::uniform(0, 0, vec![1.0; 20]).unwrap();
        assert!(detect_gaps(&regular, 1.0, DEFAULT_GAP_FACTOR).is_empty());

        let mut pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64 * 5.0, 1.0)).collect();
        pts.push((75.0, 1.0));
        pts.push((80.0, 1.0));
        let holed = PowerTrace::new(0, pts).unwrap();
        assert_eq!(
            detect_gaps(&holed, 5.0, 2.0),
            vec![Gap { start_s: 45.0, end_s: 75.0 }]
        );
    }

    #[test]
    fn energy_summary_attaches_gap_warning() {
        let holed = trace(0, &[(0.0, 100.0), (5.0, 100.0), (35.0, 100.0), (40.0, 100.0)]);
        let set = TraceSet::new("ws", 5.0).unwrap().with_trace(holed).unwrap();
        let e = set.energy(Pipeline::Interpolated, EnergyRule::Rectangle, 2.0).unwrap();
        assert_eq!(e.gaps.len(), 1);
        assert_eq!(e.total_gap_s, 30.0);
        assert!((e.kwh - 41.0 * 100.0 / JOULES_PER_KWH).abs() < 1e-15);

        let raw = set.energy(Pipeline::Raw, EnergyRule::Rectangle, 2.0).unwrap();
        assert!((raw.kwh - 4.0 * 100.0 * 5.0 / JOULES_PER_KWH).abs() < 1e-15);
    }

    #[test]
    fn trapezoid_differs_by_at_most_one_interval() {
        let powers: Vec<f64> = (0..600).map(|i| 100.0 + (i % 37) as f64).collect();
        let set = set_of(vec![PowerTrace::uniform(0, 0, powers.clone()).unwrap()]);
        let rect = integrate_kwh_with(&set, EnergyRule::Rectangle).unwrap();
        let trap = integrate_kwh_with(&set, EnergyRule::Trapezoid).unwrap();
        let duration = (powers.len() - 1) as f64;
        assert!((rect - trap).abs() / trap <= 1.0 / duration * 1.5);
    }

    fn random_trace() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((1u32..=12, 0.0f64..300.0), 2..60).prop_map(|steps| {
            let mut t = 0.0;
            steps
                .into_iter()
                .map(|(dt, p)| {
                    t += dt as f64;
                    (t, p)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn gaps_match_pairwise_scan(pts in random_trace(), factor in 1.0f64..4.0) {
            let tr = PowerTrace::new(0, pts.clone()).unwrap();
            let got = detect_gaps(&tr, 2.0, factor);
            let mut want = Vec::new();
            for i in 0..pts.len() {
                for j in (i + 1)..pts.len() {
                    let between = pts.iter().any(|p| p.0 > pts[i].0 && p.0 < pts[j].0);
                    if !between && pts[j].0 - pts[i].0 > factor * 2.0 {
                        want.push(Gap { start_s: pts[i].0, end_s: pts[j].0 });
                    }
                }
            }
            prop_assert_eq!(got, want);
        }

        #[test]
        fn energy_is_additive_over_time_partitions(
            powers in prop::collection::vec(0.0f64..300.0, 2..200),
            cut in 0usize..200,
        ) {
            let cut = (cut % powers.len()) as f64;
            let set = set_of(vec![
                PowerTrace::uniform(0, 0, powers.clone()).unwrap(),
                PowerTrace::uniform(1, 0, powers.iter().map(|p| p * 0.5).collect::<Vec<_>>()).unwrap(),
            ]);
            let whole = integrate_kwh(&set).unwrap();
            let left = set.slice(f64::NEG_INFINITY, cut);
            let right = set.slice(cut, f64::INFINITY);
            let parts: f64 = [left, right]
                .iter()
                .filter(|s| s.reading_count() > 0)
                .map(|s| integrate_kwh(s).unwrap())
                .sum();
            prop_assert!((whole - parts).abs() <= 1e-12 * whole.max(1e-12));
        }

        #[test]
        fn average_power_ignores_gpu_and_sample_order(
            a in prop::collection::vec(0.0f64..300.0, 1..30),
            b in prop::collection::vec(0.0f64..300.0, 1..30),
        ) {
            let forward = set_of(vec![
                PowerTrace::uniform(0, 0, a.clone()).unwrap(),
                PowerTrace::uniform(1, 0, b.clone()).unwrap(),
            ]);
            let swapped = set_of(vec![
                PowerTrace::uniform(0, 0, b.iter().rev().copied().collect::<Vec<_>>()).unwrap(),
                PowerTrace::uniform(1, 0, a.iter().rev().copied().collect::<Vec<_>>()).unwrap(),
            ]);
            let x = average_power(&forward).unwrap();
            let y = average_power(&swapped).unwrap();
            prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
        }

        #[test]
        fn decimating_a_constant_trace_preserves_energy(p in 0.0f64..300.0, fives in 1usize..100) {
            let n = fives * 5 + 1;
            let full = PowerTrace::uniform(0, 0, vec![p; n]).unwrap();
            let decimated: Vec<(f64, f64)> = full.samples().iter().step_by(5).copied().collect();
            let rebuilt = resample_1hz(&PowerTrace::new(0, decimated).unwrap()).unwrap();
            let e_full = integrate_kwh(&set_of(vec![full])).unwrap();
            let e_rebuilt = integrate_kwh(&set_of(vec![rebuilt])).unwrap();
            prop_assert_eq!(e_full, e_rebuilt);
        }
    }
}
