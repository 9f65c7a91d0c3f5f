//! Runs a program on the VM with CPU attribution and memory sampling attached.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::alloc::{AllocError, HeapConfig, Release, SamplingAllocator, SamplingConfig};
use crate::channel::{Channel, ChannelError, Record, RecordKind};
use crate::cpu::{
    build_call_map, on_cpu_sample, walk_to_profiled_line, CallOpcodeMap, CpuDelta, CpuSampleContext, ProfiledScope,
};
use crate::report::{Profile, ProfileReport};
use crate::units::Nanos;
use crate::vm::{
    run_with, AllocEffect, FrameInfo, FreeEffect, Hooks, LineId, Machine, MemSite, NotificationKind, Program, VmConfig,
    VmError, VmState, MAIN_THREAD,
};

/// Innermost frame added to interpreter allocations before classification.
pub const INTERPRETER_ALLOC_FRAME: &str = "Vm_ObjectAlloc";
/// Innermost frame added to `ALLOC n native`.
pub const NATIVE_ALLOC_FRAME: &str = "native_malloc";

#[derive(Debug, Clone)]
pub struct Checkpoints {
    pub interval: Nanos,
    /// Rewritten at every checkpoint; numbered copies go beside it.
    pub path: PathBuf,
}

impl Checkpoints {
    pub fn numbered_path(&self, n: usize) -> PathBuf {
        let mut name = self.path.as_os_str().to_owned();
        name.push(format!(".ckpt-{n}"));
        PathBuf::from(name)
    }
}

#[derive(Debug, Clone)]
pub struct ProfilerConfig {
    pub vm: VmConfig,
    /// Bounded-wait interval for `JOIN`; `None` leaves joins blocking.
    pub join_patch: Option<Nanos>,
    pub cpu_only: bool,
    pub sampling: SamplingConfig,
    pub heap: HeapConfig,
    /// Defaults to the entry function's source file.
    pub scope: Option<ProfiledScope>,
    pub channel_dir: PathBuf,
    pub pid: u32,
    pub checkpoints: Option<Checkpoints>,
}

impl Default for ProfilerConfig {
    fn default() -> Self {
        let vm = VmConfig::default();
        ProfilerConfig {
            join_patch: Some(vm.switch_interval),
            vm,
            cpu_only: false,
            sampling: SamplingConfig::default(),
            heap: HeapConfig::default(),
            scope: None,
            channel_dir: std::env::temp_dir(),
            pid: std::process::id(),
            checkpoints: None,
        }
    }
}

impl ProfilerConfig {
    pub fn quantum(&self) -> Nanos {
        self.vm.quantum.unwrap_or(Nanos::ZERO)
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("{0}")]
    Vm(#[from] VmError),
    #[error("{0}")]
    Channel(#[from] ChannelError),
    #[error("allocator setup: {0}")]
    Alloc(#[from] AllocError),
    #[error("writing checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: std::io::Error },
    #[error("the timer quantum must be positive")]
    NoQuantum,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CpuSample {
    pub at: Nanos,
    pub deltas: Vec<CpuDelta>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProfilerDiagnostics {
    pub timer_samples: u64,
    /// Threads skipped at a sample because they had no frames.
    pub empty_stacks: u64,
    pub drains: u64,
    pub foreign_frees: u64,
    pub decode_errors: u64,
    pub write_failures: u64,
}

#[derive(Debug)]
pub struct ProfileRun {
    pub profile: Profile,
    pub report: ProfileReport,
    /// Every drained record, in sequence order.
    pub events: Vec<Record>,
    pub cpu_log: Vec<CpuSample>,
    pub vm: VmState,
    pub diagnostics: ProfilerDiagnostics,
    pub checkpoints: Vec<PathBuf>,
}

impl ProfileRun {
    pub fn events_text(&self) -> String {
        self.events.iter().map(|r| r.encode() + "\n").collect()
    }

    pub fn run_time(&self) -> Nanos {
        self.vm.clock()
    }
}

struct Memory {
    allocator: SamplingAllocator,
    channel: Channel,
}

struct ProfilerHooks<'a> {
    q: Nanos,
    scope: ProfiledScope,
    call_map: CallOpcodeMap,
    last_signal: Nanos,
    profile: Profile,
    memory: Option<Memory>,
    events: Vec<Record>,
    cpu_log: Vec<CpuSample>,
    diagnostics: ProfilerDiagnostics,
    checkpoints: Option<&'a Checkpoints>,
    next_checkpoint: Nanos,
    written: Vec<PathBuf>,
    error: Option<ProfileError>,
}

fn notification_for(kind: RecordKind) -> NotificationKind {
    match kind {
        RecordKind::Malloc => NotificationKind::Malloc,
        RecordKind::Free => NotificationKind::Free,
        RecordKind::Copy => NotificationKind::Copy,
    }
}

impl ProfilerHooks<'_> {
    fn line_for(&self, frames: &[FrameInfo]) -> LineId {
        walk_to_profiled_line(frames, &self.scope).unwrap_or_else(LineId::unknown)
    }

    fn cpu_sample(&mut self, vm: &Machine<'_>) {
        let now = vm.clock();
        let ctx = CpuSampleContext { q: self.q, last_signal_time: self.last_signal, now };
        let main = vm.current_frames(MAIN_THREAD).unwrap_or_default();
        let others: Vec<_> = vm
            .enumerate_threads()
            .into_iter()
            .filter(|&(tid, _)| tid != MAIN_THREAD)
            .map(|(tid, status)| (status, vm.current_frames(tid).unwrap_or_default()))
            .collect();
        let outcome = on_cpu_sample(&ctx, &main, &others, &self.call_map, &self.scope);
        self.profile.apply_cpu(&outcome.deltas);
        self.diagnostics.timer_samples += 1;
        self.diagnostics.empty_stacks += outcome.skipped_empty as u64;
        self.cpu_log.push(CpuSample { at: now, deltas: outcome.deltas });
        self.last_signal = now;
    }

    fn drain(&mut self) {
        let Some(mem) = &mut self.memory else { return };
        mem.allocator.sampler_mut().enter_handler();
        let drained = mem.channel.drain();
        mem.allocator.sampler_mut().exit_handler(&mut mem.channel);
        self.diagnostics.drains += 1;
        match drained {
            Ok(records) => {
                self.profile.apply_records(&records);
                self.events.extend(records);
            }
            Err(e) => {
                self.error.get_or_insert(e.into());
            }
        }
    }

    fn write_checkpoint(&mut self, now: Nanos) {
        let Some(ck) = self.checkpoints else { return };
        self.drain();
        let text = self.profile.report(now).render();
        let numbered = ck.numbered_path(self.written.len() + 1);
        for path in [&ck.path, &numbered] {
            if let Err(source) = std::fs::write(path, &text) {
                self.error.get_or_insert(ProfileError::Checkpoint { path: path.clone(), source });
                return;
            }
        }
        self.written.push(numbered);
    }
}

impl Hooks for ProfilerHooks<'_> {
    fn on_notification(&mut self, kind: NotificationKind, vm: &Machine<'_>) {
        match kind {
            NotificationKind::Timer => self.cpu_sample(vm),
            NotificationKind::Malloc | NotificationKind::Free | NotificationKind::Copy => self.drain(),
        }
    }

    fn on_alloc(&mut self, bytes: u64, site: &MemSite) -> Result<AllocEffect, VmError> {
        let line = self.line_for(&site.frames);
        let Some(mem) = &mut self.memory else {
            return Ok(AllocEffect { address: site.fallback_address, notify: None });
        };
        let innermost = if site.native { NATIVE_ALLOC_FRAME } else { INTERPRETER_ALLOC_FRAME };
        let stack: Vec<&str> = site.frames.iter().map(|f| &*f.function).chain([innermost]).collect();
        let (address, record) = mem
            .allocator
            .allocate(bytes, &stack, &line, &mut mem.channel)
            .map_err(|e| VmError::OutOfMemory(e.to_string()))?;
        Ok(AllocEffect { address, notify: record.map(notification_for) })
    }

    fn on_free(&mut self, address: u64, site: &MemSite) -> FreeEffect {
        let line = self.line_for(&site.frames);
        let Some(mem) = &mut self.memory else {
            return FreeEffect { released: true, notify: None };
        };
        let (release, record) = mem.allocator.deallocate(address, &line, &mut mem.channel);
        if release == Release::ForeignIgnored {
            self.diagnostics.foreign_frees += 1;
        }
        FreeEffect { released: release != Release::ForeignIgnored, notify: record.map(notification_for) }
    }

    fn on_copy(&mut self, bytes: u64, site: &MemSite) -> Option<NotificationKind> {
        let line = self.line_for(&site.frames);
        let mem = self.memory.as_mut()?;
        mem.allocator.copy_bytes(bytes, &line, &mut mem.channel).map(notification_for)
    }

    fn after_step(&mut self, vm: &Machine<'_>) {
        let Some(ck) = self.checkpoints else { return };
        let now = vm.clock();
        if now >= self.next_checkpoint && !vm.state().is_halted() {
            self.write_checkpoint(now);
            while self.next_checkpoint <= now {
                self.next_checkpoint += ck.interval;
            }
        }
    }
}

fn default_scope(program: &Program) -> ProfiledScope {
    let entry = program.function(program.entry());
    match entry.lines.first() {
        Some(line) => ProfiledScope::file(&line.file),
        None => ProfiledScope::All,
    }
}

/// Profiles `program` to completion.
pub fn profile_program(program: &Program, config: &ProfilerConfig) -> Result<ProfileRun, ProfileError> {
    let q = config.vm.quantum.ok_or(ProfileError::NoQuantum)?;
    if q == Nanos::ZERO {
        return Err(ProfileError::NoQuantum);
    }
    let memory = if config.cpu_only {
        None
    } else {
        Some(Memory {
            allocator: SamplingAllocator::new(config.heap, config.sampling.clone())?,
            channel: Channel::open_in(&config.channel_dir, config.pid)?,
        })
    };
    let mut hooks = ProfilerHooks {
        q,
        scope: config.scope.clone().unwrap_or_else(|| default_scope(program)),
        call_map: build_call_map(program),
        last_signal: Nanos::ZERO,
        profile: Profile::with_known_lines(program.lines().into_iter().collect()),
        memory,
        events: Vec::new(),
        cpu_log: Vec::new(),
        diagnostics: ProfilerDiagnostics::default(),
        checkpoints: config.checkpoints.as_ref(),
        next_checkpoint: config.checkpoints.as_ref().map_or(Nanos::ZERO, |c| c.interval),
        written: Vec::new(),
        error: None,
    };
    let join_patch = config.join_patch;
    let out = run_with(program, &mut hooks, config.vm.clone(), |vm| {
        if let Some(interval) = join_patch {
            crate::cpu::patch_blocking_join(vm, interval);
        }
    })?;
    hooks.drain();
    if let Some(e) = hooks.error.take() {
        return Err(e);
    }
    if let Some(mem) = &hooks.memory {
        hooks.profile.peak_footprint = mem.allocator.state().peak;
        hooks.diagnostics.decode_errors = mem.channel.stats().decode_errors;
        hooks.diagnostics.write_failures = mem.allocator.state().write_failures;
    }
    let report = hooks.profile.report(out.state.clock());
    Ok(ProfileRun {
        profile: hooks.profile,
        report,
        events: hooks.events,
        cpu_log: hooks.cpu_log,
        vm: out.state,
        diagnostics: hooks.diagnostics,
        checkpoints: hooks.written,
    })
}

/// Convenience for tests and tools: profile with a private channel directory.
pub fn profile_in(
    program: &Program,
    mut config: ProfilerConfig,
    channel_dir: &Path,
) -> Result<ProfileRun, ProfileError> {
    config.channel_dir = channel_dir.to_path_buf();
    profile_program(program, &config)
}
