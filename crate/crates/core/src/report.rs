//! Per-line profile accumulation and the text report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::channel::{Record, RecordKind};
use crate::cpu::{CpuDelta, LineStats};
use crate::trends::SparklineBuffer;
use crate::units::Nanos;
use crate::vm::LineId;

pub const MIB: f64 = (1u64 << 20) as f64;
pub const MB: f64 = 1e6;
pub const TREND_WIDTH: usize = 27;

/// Running totals for a profiled program.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Profile {
    pub lines: BTreeMap<LineId, LineStats>,
    pub program_trend: SparklineBuffer,
    /// Lines that records may be attributed to; `None` accepts any line.
    known: Option<BTreeSet<LineId>>,
    pub peak_footprint: u64,
    /// Signed sum of malloc minus free record bytes.
    pub net_record_bytes: i64,
}

impl Profile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records naming lines outside `known` go to [`LineId::unknown`].
    pub fn with_known_lines(known: BTreeSet<LineId>) -> Self {
        Profile { known: Some(known), ..Self::default() }
    }

    pub fn line_mut(&mut self, line: &LineId) -> &mut LineStats {
        self.lines.entry(line.clone()).or_default()
    }

    pub fn apply_cpu(&mut self, deltas: &[CpuDelta]) {
        for d in deltas {
            self.line_mut(&d.line).apply_cpu(d.python, d.native);
        }
    }

    pub fn apply_records(&mut self, records: &[Record]) {
        for r in records {
            self.apply_record(r);
        }
    }

    pub fn apply_record(&mut self, r: &Record) {
        let line = match &self.known {
            Some(known) if !known.contains(&r.line) => LineId::unknown(),
            _ => r.line.clone(),
        };
        self.peak_footprint = self.peak_footprint.max(r.footprint);
        let stats = self.lines.entry(line).or_default();
        match r.kind {
            RecordKind::Malloc => {
                stats.python_alloc_bytes += r.python_bytes();
                stats.native_alloc_bytes += r.native_bytes();
                self.net_record_bytes += r.bytes as i64;
            }
            RecordKind::Free => {
                stats.python_freed_bytes += r.python_bytes();
                stats.native_freed_bytes += r.native_bytes();
                self.net_record_bytes -= r.bytes as i64;
            }
            RecordKind::Copy => stats.copy_bytes += r.bytes,
        }
        if r.kind != RecordKind::Copy {
            stats.footprint_trend.push_footprint(r.footprint);
            self.program_trend.push_footprint(r.footprint);
        }
    }

    pub fn total_python(&self) -> Nanos {
        self.lines.values().map(|s| s.python_time).sum()
    }

    pub fn total_native(&self) -> Nanos {
        self.lines.values().map(|s| s.native_time).sum()
    }

    pub fn cpu_samples(&self) -> u64 {
        self.lines.values().map(|s| s.cpu_sample_count).sum()
    }

    pub fn report(&self, run_time: Nanos) -> ProfileReport {
        let attributed = (self.total_python() + self.total_native()).0 as f64;
        let run_seconds = run_time.as_secs_f64();
        let share = |t: Nanos| if attributed > 0.0 { 100.0 * t.0 as f64 / attributed } else { 0.0 };
        let rows = self
            .lines
            .iter()
            .filter(|(_, s)| is_nonzero(s))
            .map(|(line, s)| ReportRow {
                line: line.clone(),
                python_pct: share(s.python_time),
                native_pct: share(s.native_time),
                net_python_mib: s.net_python_bytes() as f64 / MIB,
                net_native_mib: s.net_native_bytes() as f64 / MIB,
                trend: s.footprint_trend.render(TREND_WIDTH),
                copy_mb_per_s: if run_seconds > 0.0 { s.copy_bytes as f64 / MB / run_seconds } else { 0.0 },
                stats: s.clone(),
            })
            .collect();
        ProfileReport {
            run_time,
            cpu_samples: self.cpu_samples(),
            peak_footprint: self.peak_footprint,
            program_trend: self.program_trend.render(TREND_WIDTH),
            rows,
        }
    }
}

fn is_nonzero(s: &LineStats) -> bool {
    s.total_time() > Nanos::ZERO
        || s.python_alloc_bytes + s.native_alloc_bytes + s.freed_bytes() + s.copy_bytes > 0
        || !s.footprint_trend.is_empty()
}

/// Builds a profile from scratch out of CPU deltas and drained records.
pub fn aggregate(cpu_deltas: &[CpuDelta], records: &[Record], run_time: Nanos) -> ProfileReport {
    let mut p = Profile::new();
    p.apply_cpu(cpu_deltas);
    p.apply_records(records);
    p.report(run_time)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub line: LineId,
    pub python_pct: f64,
    pub native_pct: f64,
    pub net_python_mib: f64,
    pub net_native_mib: f64,
    pub trend: String,
    pub copy_mb_per_s: f64,
    pub stats: LineStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileReport {
    pub run_time: Nanos,
    pub cpu_samples: u64,
    pub peak_footprint: u64,
    pub program_trend: String,
    pub rows: Vec<ReportRow>,
}

impl ProfileReport {
    pub fn row(&self, line: &LineId) -> Option<&ReportRow> {
        self.rows.iter().find(|r| &r.line == line)
    }

    pub fn render(&self) -> String {
        render_report(self)
    }
}

pub fn render_report(report: &ProfileReport) -> String {
    let mut out = String::new();
    let w = report.rows.iter().map(|r| r.line.to_string().chars().count()).max().unwrap_or(0).max(4);
    writeln!(out, "miniprof profile").unwrap();
    writeln!(out, "run time: {:.6} s", report.run_time.as_secs_f64()).unwrap();
    writeln!(out, "cpu samples: {}", report.cpu_samples).unwrap();
    writeln!(out, "peak footprint: {:.3} MiB", report.peak_footprint as f64 / MIB).unwrap();
    writeln!(out, "program trend: {}", report.program_trend.trim_end()).unwrap();
    writeln!(
        out,
        "units: time shares are % of attributed time; net memory in MiB (2^20 bytes); copy rate in MB/s (10^6 bytes)"
    )
    .unwrap();
    writeln!(out).unwrap();
    writeln!(
        out,
        "{:<w$} | {:>7} | {:>7} | {:>9} | {:>9} | {:<tw$} | {:>9}",
        "Line",
        "Py%",
        "Native%",
        "Net Py MB",
        "Net C MB",
        "Trend",
        "Copy MB/s",
        tw = TREND_WIDTH
    )
    .unwrap();
    for r in &report.rows {
        writeln!(
            out,
            "{:<w$} | {:>7.2} | {:>7.2} | {:>9.3} | {:>9.3} | {:<tw$} | {:>9.3}",
            r.line.to_string(),
            r.python_pct,
            r.native_pct,
            r.net_python_mib,
            r.net_native_mib,
            r.trend,
            r.copy_mb_per_s,
            tw = TREND_WIDTH
        )
        .unwrap();
    }
    out
}
