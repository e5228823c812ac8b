//! Per-interval metrics rows, CSV output and run summaries.

use std::fmt;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::queue::TrafficClass;
use crate::time::SimTime;

/// One flow's observables over one sampling interval ending at `time`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub time: SimTime,
    pub interval: SimTime,
    pub flow_id: u32,
    pub class: TrafficClass,
    pub goodput_bps: f64,
    pub cwnd_bytes: f64,
    pub acked_bytes: u64,
    pub marks: u64,
    pub drops: u64,
    pub real_sojourn_mean_ns: u64,
    pub real_sojourn_p99_ns: u64,
    pub virtual_sojourn_p99_ns: u64,
    /// Backlog of the flow's class queue at the sample instant.
    pub backlog_bytes: u64,
    pub vbacklog_bytes: u64,
    pub utilization: f64,
    /// Sojourn of each of the flow's packets dequeued in the interval.
    pub sojourn_samples: Vec<u64>,
    pub virtual_sojourn_samples: Vec<u64>,
    /// Mark fractions of the flow's rounds that closed in the interval.
    pub rtt_mark_fractions: Vec<f64>,
}

pub const CSV_COLUMNS: [&str; 12] = [
    "time_ns",
    "flow_id",
    "class",
    "goodput_bps",
    "cwnd_bytes",
    "marks",
    "drops",
    "real_sojourn_p99_ns",
    "virtual_sojourn_p99_ns",
    "backlog_bytes",
    "vbacklog_bytes",
    "utilization",
];

#[derive(Serialize)]
struct CsvRow<'a> {
    time_ns: u64,
    flow_id: u32,
    class: &'a str,
    goodput_bps: f64,
    cwnd_bytes: f64,
    marks: u64,
    drops: u64,
    real_sojourn_p99_ns: u64,
    virtual_sojourn_p99_ns: u64,
    backlog_bytes: u64,
    vbacklog_bytes: u64,
    utilization: f64,
}

/// Writes records as CSV, sorted by `(time_ns, flow_id)`.
pub fn write_csv<W: Write>(records: &[MetricsRecord], out: W) -> csv::Result<()> {
    let mut sorted: Vec<&MetricsRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.time, r.flow_id));
    let mut w = csv::Writer::from_writer(out);
    if sorted.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for r in sorted {
        w.serialize(CsvRow {
            time_ns: r.time.as_nanos(),
            flow_id: r.flow_id,
            class: r.class.as_str(),
            goodput_bps: r.goodput_bps,
            cwnd_bytes: r.cwnd_bytes,
            marks: r.marks,
            drops: r.drops,
            real_sojourn_p99_ns: r.real_sojourn_p99_ns,
            virtual_sojourn_p99_ns: r.virtual_sojourn_p99_ns,
            backlog_bytes: r.backlog_bytes,
            vbacklog_bytes: r.vbacklog_bytes,
            utilization: r.utilization,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Nearest-rank 99th percentile; zero for no samples.
pub fn p99(samples: &[u64]) -> u64 {
    percentile(samples, 0.99)
}

pub fn percentile(samples: &[u64], q: f64) -> u64 {
    if samples.is_empty() {
        return 0;
    }
    let mut v = samples.to_vec();
    v.sort_unstable();
    let rank = (q * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Population coefficient of variation; zero when the mean is zero.
pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SummaryError {
    #[error("no metrics records to summarize")]
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSummary {
    pub flow_id: u32,
    pub class: TrafficClass,
    pub mean_goodput_bps: f64,
    pub p99_sojourn_ns: u64,
    pub marks: u64,
    pub drops: u64,
    pub rounds: usize,
    pub mark_fraction_mean: f64,
    pub mark_fraction_cv: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub from: SimTime,
    pub to: SimTime,
    pub utilization: f64,
    pub p99_sojourn_ns: u64,
    pub l4s_p99_sojourn_ns: u64,
    pub classic_p99_sojourn_ns: u64,
    pub l4s_p99_virtual_sojourn_ns: u64,
    /// Pooled over all scalable flows.
    pub l4s_mark_fraction_mean: f64,
    pub l4s_mark_fraction_cv: f64,
    pub flows: Vec<FlowSummary>,
}

impl Summary {
    pub fn flow(&self, id: u32) -> Option<&FlowSummary> {
        self.flows.iter().find(|f| f.flow_id == id)
    }

    pub fn total_goodput_bps(&self) -> f64 {
        self.flows.iter().map(|f| f.mean_goodput_bps).sum()
    }
}

fn pooled_p99<'a>(rs: impl Iterator<Item = &'a MetricsRecord> + Clone, virt: bool) -> u64 {
    let samples: Vec<u64> = rs
        .clone()
        .flat_map(|r| {
            if virt {
                r.virtual_sojourn_samples.iter()
            } else {
                r.sojourn_samples.iter()
            }
        })
        .copied()
        .collect();
    if samples.is_empty() {
        // records without raw samples, e.g. read back from CSV
        rs.map(|r| if virt { r.virtual_sojourn_p99_ns } else { r.real_sojourn_p99_ns })
            .max()
            .unwrap_or(0)
    } else {
        p99(&samples)
    }
}

pub fn summarize(records: &[MetricsRecord]) -> Result<Summary, SummaryError> {
    summarize_window(records, SimTime::ZERO)
}

/// Summary over records whose interval starts at or after `from`.
pub fn summarize_window(records: &[MetricsRecord], from: SimTime) -> Result<Summary, SummaryError> {
    let rs: Vec<&MetricsRecord> = records
        .iter()
        .filter(|r| r.time.saturating_sub(r.interval) >= from)
        .collect();
    if rs.is_empty() {
        return Err(SummaryError::Empty);
    }
    let start = rs.iter().map(|r| r.time.saturating_sub(r.interval)).min().unwrap();
    let end = rs.iter().map(|r| r.time).max().unwrap();

    // utilization is link-wide: weight each sample instant once
    let mut times: Vec<(SimTime, SimTime, f64)> = rs.iter().map(|r| (r.time, r.interval, r.utilization)).collect();
    times.sort_by_key(|t| t.0);
    times.dedup_by_key(|t| t.0);
    let w: f64 = times.iter().map(|t| t.1.as_nanos() as f64).sum();
    let utilization = if w > 0.0 {
        times.iter().map(|t| t.2 * t.1.as_nanos() as f64).sum::<f64>() / w
    } else {
        mean(&times.iter().map(|t| t.2).collect::<Vec<_>>())
    };

    let mut ids: Vec<u32> = rs.iter().map(|r| r.flow_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let flows: Vec<FlowSummary> = ids
        .iter()
        .map(|&id| {
            let fr: Vec<&MetricsRecord> = rs.iter().copied().filter(|r| r.flow_id == id).collect();
            let w: f64 = fr.iter().map(|r| r.interval.as_nanos() as f64).sum();
            let mean_goodput_bps = if w > 0.0 {
                fr.iter().map(|r| r.goodput_bps * r.interval.as_nanos() as f64).sum::<f64>() / w
            } else {
                mean(&fr.iter().map(|r| r.goodput_bps).collect::<Vec<_>>())
            };
            let fractions: Vec<f64> = fr.iter().flat_map(|r| r.rtt_mark_fractions.iter().copied()).collect();
            FlowSummary {
                flow_id: id,
                class: fr[0].class,
                mean_goodput_bps,
                p99_sojourn_ns: pooled_p99(fr.iter().copied(), false),
                marks: fr.iter().map(|r| r.marks).sum(),
                drops: fr.iter().map(|r| r.drops).sum(),
                rounds: fractions.len(),
                mark_fraction_mean: mean(&fractions),
                mark_fraction_cv: coefficient_of_variation(&fractions),
            }
        })
        .collect();

    let l4s = rs.iter().copied().filter(|r| r.class == TrafficClass::L4S);
    let classic = rs.iter().copied().filter(|r| r.class == TrafficClass::Classic);
    let l4s_fractions: Vec<f64> = l4s.clone().flat_map(|r| r.rtt_mark_fractions.iter().copied()).collect();

    Ok(Summary {
        from: start,
        to: end,
        utilization,
        p99_sojourn_ns: pooled_p99(rs.iter().copied(), false),
        l4s_p99_sojourn_ns: pooled_p99(l4s.clone(), false),
        classic_p99_sojourn_ns: pooled_p99(classic, false),
        l4s_p99_virtual_sojourn_ns: pooled_p99(l4s, true),
        l4s_mark_fraction_mean: mean(&l4s_fractions),
        l4s_mark_fraction_cv: coefficient_of_variation(&l4s_fractions),
        flows,
    })
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "window        {:.1} .. {:.1} s", self.from.as_secs_f64(), self.to.as_secs_f64())?;
        writeln!(f, "utilization   {:.4}", self.utilization)?;
        writeln!(f, "p99 sojourn   {:.3} ms (L4S {:.3} ms, Classic {:.3} ms)",
            self.p99_sojourn_ns as f64 / 1e6,
            self.l4s_p99_sojourn_ns as f64 / 1e6,
            self.classic_p99_sojourn_ns as f64 / 1e6)?;
        writeln!(f, "p99 vsojourn  {:.3} ms", self.l4s_p99_virtual_sojourn_ns as f64 / 1e6)?;
        writeln!(f, "L4S marks/rtt mean {:.4} cv {:.4}", self.l4s_mark_fraction_mean, self.l4s_mark_fraction_cv)?;
        writeln!(f)?;
        writeln!(f, "{:>4} {:<8} {:>14} {:>12} {:>8} {:>8} {:>7} {:>8} {:>8}",
            "flow", "class", "goodput_bps", "p99_ms", "marks", "drops", "rounds", "F_mean", "F_cv")?;
        for fl in &self.flows {
            writeln!(f, "{:>4} {:<8} {:>14.0} {:>12.3} {:>8} {:>8} {:>7} {:>8.4} {:>8.4}",
                fl.flow_id, fl.class.as_str(), fl.mean_goodput_bps,
                fl.p99_sojourn_ns as f64 / 1e6, fl.marks, fl.drops, fl.rounds,
                fl.mark_fraction_mean, fl.mark_fraction_cv)?;
        }
        Ok(())
    }
}
