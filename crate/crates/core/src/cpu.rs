//! Interpreter/native CPU attribution from delayed timer delivery.
//!
//! Each delivered timer sample credits the main thread's profiled line with
//! one quantum `q` of interpreter time and with `T - q` of native time, where
//! `T` is the time since the previous delivery. Timer delivery is held back
//! for as long as native code runs, so the excess delay is native time.
//!
//! Other threads never receive samples. At each main-thread sample every
//! executing thread is inspected: if its innermost frame sits on a `CALL_*`
//! opcode it is credited `q` of native time, otherwise `q` of interpreter
//! time. Grants are not normalized across threads, so with several
//! executing threads the summed time can exceed elapsed time.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::trends::SparklineBuffer;
use crate::units::Nanos;
use crate::vm::{FrameInfo, LineId, Machine, Program, ThreadStatus};

pub const DEFAULT_QUANTUM: Nanos = Nanos::from_millis(10);

/// Disassembly prefix identifying calls out of the interpreter.
pub const CALL_PREFIX: &str = "CALL_";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CpuSampleContext {
    pub q: Nanos,
    pub last_signal_time: Nanos,
    pub now: Nanos,
}

impl CpuSampleContext {
    /// `T`, clamped at zero if the clock reads earlier than the last signal.
    pub fn elapsed(&self) -> Nanos {
        self.now.saturating_sub(self.last_signal_time)
    }

    /// `T - q`, clamped at zero.
    pub fn native_share(&self) -> Nanos {
        self.elapsed().saturating_sub(self.q)
    }
}

/// Opcode indices per function whose disassembled name starts with `CALL_`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CallOpcodeMap {
    calls: BTreeMap<Arc<str>, BTreeSet<usize>>,
}

impl CallOpcodeMap {
    pub fn contains(&self, function: &str, index: usize) -> bool {
        self.calls.get(function).is_some_and(|s| s.contains(&index))
    }

    pub fn calls_in(&self, function: &str) -> Option<&BTreeSet<usize>> {
        self.calls.get(function)
    }

    pub fn functions(&self) -> impl Iterator<Item = &str> {
        self.calls.keys().map(|k| &**k)
    }
}

pub fn build_call_map(program: &Program) -> CallOpcodeMap {
    let mut calls: BTreeMap<Arc<str>, BTreeSet<usize>> =
        program.functions().iter().map(|f| (f.name.clone(), BTreeSet::new())).collect();
    for row in program.disassemble() {
        if row.name.starts_with(CALL_PREFIX) {
            let name = &program.function(row.function).name;
            calls.get_mut(name).expect("every function has an entry").insert(row.index);
        }
    }
    CallOpcodeMap { calls }
}

/// Which source files count as profiled code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProfiledScope {
    All,
    Files(BTreeSet<String>),
}

impl ProfiledScope {
    pub fn file(name: &str) -> Self {
        ProfiledScope::Files(BTreeSet::from([name.to_string()]))
    }

    pub fn includes(&self, file: &str) -> bool {
        match self {
            ProfiledScope::All => true,
            ProfiledScope::Files(files) => files.contains(file),
        }
    }
}

/// Line of the innermost frame inside `scope`; the outermost frame's line
/// when no frame is in scope; `None` for an empty stack.
pub fn walk_to_profiled_line(frames: &[FrameInfo], scope: &ProfiledScope) -> Option<LineId> {
    frames.iter().rev().find(|f| scope.includes(&f.line.file)).or_else(|| frames.first()).map(|f| f.line.clone())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CpuDelta {
    pub line: LineId,
    pub python: Nanos,
    pub native: Nanos,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleOutcome {
    pub deltas: Vec<CpuDelta>,
    /// Threads skipped because they had no frames.
    pub skipped_empty: usize,
}

/// Splits one timer sample into per-line interpreter and native time.
///
/// The caller advances `last_signal_time` to `ctx.now` afterwards.
pub fn on_cpu_sample(
    ctx: &CpuSampleContext,
    main_frames: &[FrameInfo],
    others: &[(ThreadStatus, Vec<FrameInfo>)],
    call_map: &CallOpcodeMap,
    scope: &ProfiledScope,
) -> SampleOutcome {
    let mut out = SampleOutcome::default();
    match walk_to_profiled_line(main_frames, scope) {
        Some(line) => out.deltas.push(CpuDelta { line, python: ctx.q, native: ctx.native_share() }),
        None => out.skipped_empty += 1,
    }
    for (status, frames) in others {
        if *status != ThreadStatus::Executing {
            continue;
        }
        let (Some(innermost), Some(line)) = (frames.last(), walk_to_profiled_line(frames, scope)) else {
            out.skipped_empty += 1;
            continue;
        };
        let delta = if call_map.contains(&innermost.function, innermost.index) {
            CpuDelta { line, python: Nanos::ZERO, native: ctx.q }
        } else {
            CpuDelta { line, python: ctx.q, native: Nanos::ZERO }
        };
        out.deltas.push(delta);
    }
    out
}

/// Installs the bounded-wait replacement for `JOIN`.
pub fn patch_blocking_join(vm: &mut Machine<'_>, switch_interval: Nanos) {
    vm.patch_blocking_join(switch_interval);
}

/// Per-line accumulators. Every field only grows during a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LineStats {
    pub python_time: Nanos,
    pub native_time: Nanos,
    /// Number of interpreter quanta credited to this line.
    pub cpu_sample_count: u64,
    pub python_alloc_bytes: u64,
    pub native_alloc_bytes: u64,
    pub python_freed_bytes: u64,
    pub native_freed_bytes: u64,
    pub copy_bytes: u64,
    pub footprint_trend: SparklineBuffer,
}

impl LineStats {
    pub fn python_seconds(&self) -> f64 {
        self.python_time.as_secs_f64()
    }

    pub fn native_seconds(&self) -> f64 {
        self.native_time.as_secs_f64()
    }

    pub fn total_time(&self) -> Nanos {
        self.python_time + self.native_time
    }

    pub fn freed_bytes(&self) -> u64 {
        self.python_freed_bytes + self.native_freed_bytes
    }

    pub fn net_python_bytes(&self) -> i64 {
        self.python_alloc_bytes as i64 - self.python_freed_bytes as i64
    }

    pub fn net_native_bytes(&self) -> i64 {
        self.native_alloc_bytes as i64 - self.native_freed_bytes as i64
    }

    /// Native share of this line's time, if it has any.
    pub fn native_fraction(&self) -> Option<f64> {
        let total = self.total_time();
        (total > Nanos::ZERO).then(|| self.native_time.0 as f64 / total.0 as f64)
    }

    pub fn apply_cpu(&mut self, python: Nanos, native: Nanos) {
        if python > Nanos::ZERO {
            self.cpu_sample_count += 1;
        }
        self.python_time += python;
        self.native_time += native;
    }
}
