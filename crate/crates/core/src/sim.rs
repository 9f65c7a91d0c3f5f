//! Closed-form event simulation of the delayed-delivery estimator.
//!
//! Each line of a synthetic program has an interpreter phase followed by a
//! native phase. The timer fires `q` after the previous delivery. A tick
//! during an interpreter phase is delivered at once; a tick during a native
//! phase is held until the phase ends. Every sample credits `q` to the
//! line's interpreter estimate and `T - q` to its native estimate.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto};
use thiserror::Error;

use crate::units::Nanos;

pub const DEFAULT_ALPHA: f64 = 1.16;
pub const DEFAULT_LINES: usize = 100;
pub const DEFAULT_RUNS: usize = 10;
pub const CSV_HEADER: &str = "time,ratio_python,ratio_native,rho_python,rho_native";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("alpha must be greater than 1, got {0}")]
    InvalidAlpha(f64),
    #[error("a workload needs at least one line")]
    NoLines,
    #[error("total time must be positive")]
    NoTime,
    #[error("quantum must be positive")]
    NoQuantum,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum RankError {
    #[error("inputs have different lengths ({0} and {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two points")]
    TooShort,
    #[error("rank variance is zero; correlation is undefined")]
    ZeroVariance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineCost {
    /// Seconds per visit.
    pub python: f64,
    pub native: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimWorkload {
    pub lines: Vec<LineCost>,
    pub alpha: f64,
    pub seed: u64,
}

impl SimWorkload {
    pub fn total_cost(&self) -> f64 {
        self.lines.iter().map(|l| l.python + l.native).sum()
    }

    /// Same proportions, rescaled so one pass over the lines takes `total`.
    pub fn scaled_to(&self, total: f64) -> SimWorkload {
        let k = total / self.total_cost();
        SimWorkload {
            lines: self.lines.iter().map(|l| LineCost { python: l.python * k, native: l.native * k }).collect(),
            ..self.clone()
        }
    }

    pub fn python_costs(&self) -> Vec<f64> {
        self.lines.iter().map(|l| l.python).collect()
    }

    pub fn native_costs(&self) -> Vec<f64> {
        self.lines.iter().map(|l| l.native).collect()
    }
}

/// Independent Pareto(`alpha`, minimum 1) draws for both phases of every
/// line, normalized so one pass costs one second in total.
pub fn generate_workload(n: usize, alpha: f64, seed: u64) -> Result<SimWorkload, SimError> {
    if n == 0 {
        return Err(SimError::NoLines);
    }
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(SimError::InvalidAlpha(alpha));
    }
    let pareto = Pareto::new(1.0, alpha).map_err(|_| SimError::InvalidAlpha(alpha))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lines = (0..n).map(|_| LineCost { python: pareto.sample(&mut rng), native: pareto.sample(&mut rng) }).collect();
    Ok(SimWorkload { lines, alpha, seed }.scaled_to(1.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LineOutcome {
    pub actual_python: Nanos,
    pub actual_native: Nanos,
    pub est_python: Nanos,
    pub est_native: Nanos,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub lines: Vec<LineOutcome>,
    pub q: Nanos,
    pub total_time: Nanos,
    pub samples: u64,
    pub rho_python: Option<f64>,
    pub rho_native: Option<f64>,
    pub ratio_python: f64,
    pub ratio_native: f64,
}

impl SimResult {
    pub fn actual_python(&self) -> Nanos {
        self.lines.iter().map(|l| l.actual_python).sum()
    }

    pub fn actual_native(&self) -> Nanos {
        self.lines.iter().map(|l| l.actual_native).sum()
    }

    pub fn est_python(&self) -> Nanos {
        self.lines.iter().map(|l| l.est_python).sum()
    }

    pub fn est_native(&self) -> Nanos {
        self.lines.iter().map(|l| l.est_native).sum()
    }

    fn column(&self, f: impl Fn(&LineOutcome) -> Nanos) -> Vec<f64> {
        self.lines.iter().map(|l| f(l).0 as f64).collect()
    }
}

struct Clock {
    q: Nanos,
    now: Nanos,
    last: Nanos,
    next_tick: Nanos,
    samples: u64,
}

impl Clock {
    fn deliver(&mut self, at: Nanos, line: &mut LineOutcome) {
        let t = at.saturating_sub(self.last);
        line.est_python += self.q;
        line.est_native += t.saturating_sub(self.q);
        self.samples += 1;
        self.last = at;
    }

    fn python_phase(&mut self, d: Nanos, line: &mut LineOutcome) {
        let end = self.now + d;
        while self.next_tick <= end {
            let tick = self.next_tick;
            self.deliver(tick, line);
            self.next_tick = tick + self.q;
        }
        self.now = end;
    }

    fn native_phase(&mut self, d: Nanos, line: &mut LineOutcome) {
        let end = self.now + d;
        if self.next_tick <= end {
            self.deliver(end, line);
            self.next_tick = end + self.q;
        }
        self.now = end;
    }
}

/// Visits lines in order, cycling, until `total_time` has elapsed. The
/// final phase is cut short at `total_time`.
pub fn simulate_run(workload: &SimWorkload, total_time: f64, q: f64) -> Result<SimResult, SimError> {
    if workload.lines.is_empty() {
        return Err(SimError::NoLines);
    }
    let total = Nanos::from_secs_f64(total_time);
    let q = Nanos::from_secs_f64(q);
    if total == Nanos::ZERO {
        return Err(SimError::NoTime);
    }
    if q == Nanos::ZERO {
        return Err(SimError::NoQuantum);
    }
    let costs: Vec<(Nanos, Nanos)> =
        workload.lines.iter().map(|l| (Nanos::from_secs_f64(l.python), Nanos::from_secs_f64(l.native))).collect();
    let mut lines = vec![LineOutcome::default(); costs.len()];
    let mut clock = Clock { q, now: Nanos::ZERO, last: Nanos::ZERO, next_tick: q, samples: 0 };
    let pass: Nanos = costs.iter().map(|&(p, c)| p + c).sum();
    if pass > Nanos::ZERO {
        'run: loop {
            for (i, &(p, c)) in costs.iter().enumerate() {
                let line = &mut lines[i];
                let p = p.min(total - clock.now);
                line.actual_python += p;
                clock.python_phase(p, line);
                let c = c.min(total - clock.now);
                line.actual_native += c;
                clock.native_phase(c, line);
                if clock.now >= total {
                    break 'run;
                }
            }
        }
    }
    let mut result = SimResult {
        lines,
        q,
        total_time: total,
        samples: clock.samples,
        rho_python: None,
        rho_native: None,
        ratio_python: 0.0,
        ratio_native: 0.0,
    };
    result.ratio_python = ratio(result.est_python(), result.actual_python());
    result.ratio_native = ratio(result.est_native(), result.actual_native());
    if result.lines.len() >= 2 {
        result.rho_python = spearman_rho(&result.column(|l| l.actual_python), &result.column(|l| l.est_python)).ok();
        result.rho_native = spearman_rho(&result.column(|l| l.actual_native), &result.column(|l| l.est_native)).ok();
    }
    Ok(result)
}

fn ratio(est: Nanos, actual: Nanos) -> f64 {
    if actual == Nanos::ZERO {
        if est == Nanos::ZERO {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        est.0 as f64 / actual.0 as f64
    }
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64, RankError> {
    if xs.len() != ys.len() {
        return Err(RankError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(RankError::TooShort);
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let mean = (xs.len() as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(RankError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub runs: usize,
    pub times: Vec<f64>,
    pub lines: usize,
    pub alpha: f64,
    pub q: f64,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            runs: DEFAULT_RUNS,
            times: doubling_times(64.0),
            lines: DEFAULT_LINES,
            alpha: DEFAULT_ALPHA,
            q: 0.01,
            seed: 0,
        }
    }
}

/// 1, 2, 4, ... up to and including the largest power of two ≤ `max`.
pub fn doubling_times(max: f64) -> Vec<f64> {
    std::iter::successors(Some(1.0), |t| Some(t * 2.0)).take_while(|&t| t <= max).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyRow {
    pub time: f64,
    pub ratio_python: f64,
    pub ratio_native: f64,
    pub rho_python: f64,
    pub rho_native: f64,
    pub abs_err_python: f64,
    pub abs_err_native: f64,
    /// Smallest per-run correlations at this time point.
    pub min_rho_python: f64,
    pub min_rho_native: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyTable {
    pub rows: Vec<StudyRow>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Run `r` uses workload seed `seed + r`, the same at every time point.
pub fn run_study(config: &StudyConfig) -> Result<StudyTable, SimError> {
    let workloads: Vec<SimWorkload> = (0..config.runs as u64)
        .map(|r| generate_workload(config.lines, config.alpha, config.seed.wrapping_add(r)))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::with_capacity(config.times.len());
    for &time in &config.times {
        let results: Vec<SimResult> =
            workloads.iter().map(|w| simulate_run(&w.scaled_to(time), time, config.q)).collect::<Result<_, _>>()?;
        let rho_p: Vec<f64> = results.iter().filter_map(|r| r.rho_python).collect();
        let rho_c: Vec<f64> = results.iter().filter_map(|r| r.rho_native).collect();
        rows.push(StudyRow {
            time,
            ratio_python: mean(results.iter().map(|r| r.ratio_python)),
            ratio_native: mean(results.iter().map(|r| r.ratio_native)),
            rho_python: mean(rho_p.iter().copied()),
            rho_native: mean(rho_c.iter().copied()),
            abs_err_python: mean(results.iter().map(|r| (r.ratio_python - 1.0).abs())),
            abs_err_native: mean(results.iter().map(|r| (r.ratio_native - 1.0).abs())),
            min_rho_python: rho_p.iter().copied().fold(f64::NAN, f64::min),
            min_rho_native: rho_c.iter().copied().fold(f64::NAN, f64::min),
        });
    }
    Ok(StudyTable { rows })
}

impl StudyTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.time, r.ratio_python, r.ratio_native, r.rho_python, r.rho_native
            )
            .unwrap();
        }
        out
    }

    pub fn row_at(&self, time: f64) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.time == time)
    }
}
