//! Deterministic execution of a [`Program`] on green threads.
//!
//! One thread holds the interpreter lock at a time. Notifications (timer,
//! allocation, copy) are queued and handed to [`Hooks::on_notification`] only
//! at an opcode boundary on the main thread. `CALL_NATIVE` advances the clock
//! by its whole duration in a single step, so no notification is delivered and
//! no thread switch occurs while it runs.

use std::collections::VecDeque;
use std::sync::Arc;

use thiserror::Error;

use super::program::{FuncId, LineId, Opcode, Program, ThreadId};
use crate::units::Nanos;

pub const MAIN_THREAD: ThreadId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NotificationKind {
    Timer,
    Malloc,
    Free,
    Copy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreadStatus {
    Executing,
    Sleeping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    Virtual,
    /// Not implemented; [`run`] rejects it.
    Wall,
}

#[derive(Debug, Clone)]
pub struct VmConfig {
    pub op_cost: Nanos,
    pub switch_interval: Nanos,
    /// Timer quantum; `None` disables the timer.
    pub quantum: Option<Nanos>,
    /// Phase of the first timer tick, which fires at `offset + quantum`.
    /// The timer is one-shot and is re-armed for `quantum` after each
    /// delivery, so consecutive deliveries are never closer than `quantum`.
    pub timer_offset: Nanos,
    pub max_time: Nanos,
    pub clock_mode: ClockMode,
}

impl Default for VmConfig {
    fn default() -> Self {
        VmConfig {
            op_cost: Nanos::from_micros(10),
            switch_interval: Nanos::from_millis(5),
            quantum: Some(Nanos::from_millis(10)),
            timer_offset: Nanos::ZERO,
            max_time: Nanos::from_secs(3600),
            clock_mode: ClockMode::Virtual,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub func: FuncId,
    /// Next opcode to execute.
    pub pc: usize,
    /// Opcode most recently started in this frame.
    pub current: Option<usize>,
    pub stack: Vec<i64>,
}

impl Frame {
    fn new(func: FuncId) -> Self {
        Frame { func, pc: 0, current: None, stack: Vec::new() }
    }

    /// The opcode index a profiler sees for this frame.
    pub fn opcode_index(&self) -> usize {
        self.current.unwrap_or(self.pc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Wait {
    Runnable,
    /// Blocked until `target` exits or, for a patched join, until `until`.
    Join {
        target: ThreadId,
        until: Option<Nanos>,
    },
}

#[derive(Debug, Clone)]
pub struct ThreadRec {
    pub id: ThreadId,
    pub frames: Vec<Frame>,
    pub status: ThreadStatus,
    pub alive: bool,
    wait: Wait,
}

impl ThreadRec {
    fn new(id: ThreadId, func: FuncId) -> Self {
        ThreadRec {
            id,
            frames: vec![Frame::new(func)],
            status: ThreadStatus::Executing,
            alive: true,
            wait: Wait::Runnable,
        }
    }

    fn runnable(&self) -> bool {
        self.alive && self.wait == Wait::Runnable
    }
}

/// Snapshot of one frame, as a profiler sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameInfo {
    pub function: Arc<str>,
    pub index: usize,
    pub line: LineId,
}

/// Outermost frame first, innermost last.
pub type FrameStack = Vec<FrameInfo>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VmDiagnostics {
    pub steps: u64,
    pub delivered: u64,
    /// Notifications dropped because one of the same kind was already queued.
    pub coalesced: u64,
    /// Whole timer periods that elapsed while a tick awaited delivery.
    pub expired_while_pending: u64,
    pub invalid_frees: u64,
    pub idle: Nanos,
}

#[derive(Debug, Clone)]
pub struct VmState {
    clock: Nanos,
    threads: Vec<ThreadRec>,
    gil_holder: ThreadId,
    pending: VecDeque<NotificationKind>,
    switch_interval: Nanos,
    slice_start: Nanos,
    next_tick: Option<Nanos>,
    join_patch: Option<Nanos>,
    halted: bool,
    next_fake_address: u64,
    pub diagnostics: VmDiagnostics,
}

impl VmState {
    pub fn clock(&self) -> Nanos {
        self.clock
    }

    pub fn threads(&self) -> &[ThreadRec] {
        &self.threads
    }

    pub fn gil_holder(&self) -> ThreadId {
        self.gil_holder
    }

    pub fn pending(&self) -> impl Iterator<Item = NotificationKind> + '_ {
        self.pending.iter().copied()
    }

    pub fn switch_interval(&self) -> Nanos {
        self.switch_interval
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn join_patch(&self) -> Option<Nanos> {
        self.join_patch
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VmError {
    #[error("stack underflow in {function} at opcode {index}")]
    StackUnderflow { function: String, index: usize },
    #[error("unknown or exited thread {0}")]
    UnknownThread(ThreadId),
    #[error("all threads blocked with no pending wake-up at {0}")]
    Deadlock(Nanos),
    #[error("virtual time limit exceeded at {0}")]
    Runaway(Nanos),
    #[error("machine already halted")]
    Halted,
    #[error("allocation failed: {0}")]
    OutOfMemory(String),
    #[error("{0} is not supported")]
    Unsupported(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Ran(ThreadId),
    Halted,
}

/// Where a memory opcode executes.
#[derive(Debug, Clone)]
pub struct MemSite {
    pub thread: ThreadId,
    /// Set for `ALLOC n native`.
    pub native: bool,
    pub frames: FrameStack,
    /// An address the hook may return when it does not manage memory.
    pub fallback_address: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocEffect {
    pub address: u64,
    pub notify: Option<NotificationKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreeEffect {
    pub released: bool,
    pub notify: Option<NotificationKind>,
}

pub trait Hooks {
    fn on_notification(&mut self, _kind: NotificationKind, _vm: &Machine<'_>) {}

    fn on_alloc(&mut self, _bytes: u64, site: &MemSite) -> Result<AllocEffect, VmError> {
        Ok(AllocEffect { address: site.fallback_address, notify: None })
    }

    fn on_free(&mut self, _address: u64, _site: &MemSite) -> FreeEffect {
        FreeEffect { released: true, notify: None }
    }

    fn on_copy(&mut self, _bytes: u64, _site: &MemSite) -> Option<NotificationKind> {
        None
    }

    fn after_step(&mut self, _vm: &Machine<'_>) {}
}

/// Hooks that observe nothing.
#[derive(Debug, Default)]
pub struct NoHooks;

impl Hooks for NoHooks {}

pub struct Machine<'p> {
    program: &'p Program,
    config: VmConfig,
    state: VmState,
}

impl<'p> Machine<'p> {
    pub fn new(program: &'p Program, config: VmConfig) -> Self {
        let next_tick = config.quantum.map(|q| config.timer_offset + q);
        let mut main = ThreadRec::new(MAIN_THREAD, program.entry());
        let empty_entry = program.function(program.entry()).is_empty();
        if empty_entry {
            main.alive = false;
            main.frames.clear();
        }
        let state = VmState {
            clock: Nanos::ZERO,
            threads: vec![main],
            gil_holder: MAIN_THREAD,
            pending: VecDeque::new(),
            switch_interval: config.switch_interval,
            slice_start: Nanos::ZERO,
            next_tick,
            join_patch: None,
            halted: empty_entry,
            next_fake_address: 0x1000,
            diagnostics: VmDiagnostics::default(),
        };
        Machine { program, config, state }
    }

    pub fn program(&self) -> &'p Program {
        self.program
    }

    pub fn state(&self) -> &VmState {
        &self.state
    }

    pub fn into_state(self) -> VmState {
        self.state
    }

    pub fn config(&self) -> &VmConfig {
        &self.config
    }

    pub fn clock(&self) -> Nanos {
        self.state.clock
    }

    /// Replaces blocking `JOIN` with a loop of waits bounded by `interval`.
    pub fn patch_blocking_join(&mut self, interval: Nanos) {
        self.state.join_patch = Some(interval.max(Nanos(1)));
    }

    /// Queues a notification, coalescing it with a queued one of the same kind.
    pub fn notify(&mut self, kind: NotificationKind) {
        if self.state.pending.contains(&kind) {
            self.state.diagnostics.coalesced += 1;
        } else {
            self.state.pending.push_back(kind);
        }
    }

    /// Every live thread, in id order.
    pub fn enumerate_threads(&self) -> Vec<(ThreadId, ThreadStatus)> {
        self.state.threads.iter().filter(|t| t.alive).map(|t| (t.id, t.status)).collect()
    }

    pub fn current_frames(&self, thread: ThreadId) -> Result<FrameStack, VmError> {
        let t = self.state.threads.get(thread).filter(|t| t.alive).ok_or(VmError::UnknownThread(thread))?;
        Ok(self.snapshot(t))
    }

    fn snapshot(&self, t: &ThreadRec) -> FrameStack {
        t.frames
            .iter()
            .map(|f| {
                let func = self.program.function(f.func);
                let index = f.opcode_index().min(func.len().saturating_sub(1));
                FrameInfo { function: func.name.clone(), index, line: func.lines[index].clone() }
            })
            .collect()
    }

    /// Executes one opcode of the lock holder, then delivers queued
    /// notifications if that holder is the main thread.
    pub fn step(&mut self, hooks: &mut dyn Hooks) -> Result<StepOutcome, VmError> {
        if self.state.halted {
            return Err(VmError::Halted);
        }
        if self.state.clock > self.config.max_time {
            return Err(VmError::Runaway(self.state.clock));
        }
        self.schedule()?;
        let tid = self.state.gil_holder;
        self.execute(tid, hooks)?;
        self.state.diagnostics.steps += 1;
        self.wake_threads();

        if tid == MAIN_THREAD && !self.state.pending.is_empty() {
            let queued = std::mem::take(&mut self.state.pending);
            for kind in queued {
                self.state.diagnostics.delivered += 1;
                if kind == NotificationKind::Timer {
                    self.state.next_tick = self.config.quantum.map(|q| self.state.clock + q);
                }
                hooks.on_notification(kind, self);
            }
        }
        if !self.state.halted {
            self.maybe_rotate();
        }
        hooks.after_step(self);
        Ok(if self.state.halted { StepOutcome::Halted } else { StepOutcome::Ran(tid) })
    }

    fn advance(&mut self, d: Nanos) {
        self.state.clock += d;
        if let Some(tick) = self.state.next_tick {
            if tick <= self.state.clock {
                self.state.next_tick = None;
                self.notify(NotificationKind::Timer);
                self.state.diagnostics.expired_while_pending +=
                    (self.state.clock - tick).as_nanos() / self.config.quantum.map_or(1, |q| q.as_nanos());
            }
        }
    }

    fn wake_threads(&mut self) {
        let clock = self.state.clock;
        let alive: Vec<bool> = self.state.threads.iter().map(|t| t.alive).collect();
        for t in self.state.threads.iter_mut().filter(|t| t.alive) {
            if let Wait::Join { target, until } = t.wait {
                let done = !alive.get(target).copied().unwrap_or(false);
                if done || until.is_some_and(|u| u <= clock) {
                    t.wait = Wait::Runnable;
                }
            }
        }
    }

    fn next_runnable_after(&self, tid: ThreadId) -> Option<ThreadId> {
        let n = self.state.threads.len();
        (1..=n).map(|k| (tid + k) % n).find(|&i| self.state.threads[i].runnable())
    }

    fn schedule(&mut self) -> Result<(), VmError> {
        loop {
            self.wake_threads();
            if self.state.threads[self.state.gil_holder].runnable() {
                return Ok(());
            }
            if let Some(next) = self.next_runnable_after(self.state.gil_holder) {
                self.state.gil_holder = next;
                self.state.slice_start = self.state.clock;
                return Ok(());
            }
            let wake = self
                .state
                .threads
                .iter()
                .filter(|t| t.alive)
                .filter_map(|t| match t.wait {
                    Wait::Join { until, .. } => until,
                    Wait::Runnable => None,
                })
                .min()
                .ok_or(VmError::Deadlock(self.state.clock))?;
            let idle = wake.saturating_sub(self.state.clock);
            self.state.diagnostics.idle += idle;
            self.advance(idle);
        }
    }

    fn maybe_rotate(&mut self) {
        let holder = self.state.gil_holder;
        let expired = self.state.clock.saturating_sub(self.state.slice_start) >= self.state.switch_interval;
        if expired || !self.state.threads[holder].runnable() {
            if let Some(next) = self.next_runnable_after(holder) {
                self.state.gil_holder = next;
            }
            self.state.slice_start = self.state.clock;
        }
    }

    fn mem_site(&mut self, tid: ThreadId, native: bool) -> MemSite {
        let frames = self.snapshot(&self.state.threads[tid]);
        let fallback_address = self.state.next_fake_address;
        self.state.next_fake_address += 16;
        MemSite { thread: tid, native, frames, fallback_address }
    }

    fn pop(&mut self, tid: ThreadId) -> Result<i64, VmError> {
        let program = self.program;
        let frame = self.state.threads[tid].frames.last_mut().expect("live thread has a frame");
        frame.stack.pop().ok_or_else(|| VmError::StackUnderflow {
            function: program.function(frame.func).name.to_string(),
            index: frame.opcode_index(),
        })
    }

    fn push(&mut self, tid: ThreadId, v: i64) {
        self.state.threads[tid].frames.last_mut().expect("live thread has a frame").stack.push(v);
    }

    fn return_from_frame(&mut self, tid: ThreadId) {
        let t = &mut self.state.threads[tid];
        let done = t.frames.pop().expect("live thread has a frame");
        if let Some(caller) = t.frames.last_mut() {
            if let Some(v) = done.stack.last() {
                caller.stack.push(*v);
            }
        } else {
            t.alive = false;
            t.wait = Wait::Runnable;
            if tid == MAIN_THREAD {
                self.state.halted = true;
            }
        }
    }

    fn execute(&mut self, tid: ThreadId, hooks: &mut dyn Hooks) -> Result<(), VmError> {
        let program = self.program;
        let frame = self.state.threads[tid].frames.last_mut().expect("live thread has a frame");
        let func = program.function(frame.func);
        if frame.pc >= func.len() {
            // Falling off the end of a function acts as RET.
            self.advance(self.config.op_cost);
            self.return_from_frame(tid);
            return Ok(());
        }
        let index = frame.pc;
        frame.current = Some(index);
        frame.pc += 1;
        let op = &func.code[index];
        let mut cost = self.config.op_cost;

        match op {
            Opcode::Push(k) => self.push(tid, *k),
            Opcode::Pop => {
                self.pop(tid)?;
            }
            Opcode::Add => {
                let b = self.pop(tid)?;
                let a = self.pop(tid)?;
                self.push(tid, a.wrapping_add(b));
            }
            Opcode::Jmp(t) => self.state.threads[tid].frames.last_mut().unwrap().pc = *t,
            Opcode::Jnz(t) => {
                let frame = self.state.threads[tid].frames.last_mut().unwrap();
                let top = *frame
                    .stack
                    .last()
                    .ok_or_else(|| VmError::StackUnderflow { function: func.name.to_string(), index })?;
                if top != 0 {
                    frame.pc = *t;
                }
            }
            Opcode::Call(f) => {
                if !program.function(*f).is_empty() {
                    self.state.threads[tid].frames.push(Frame::new(*f));
                }
            }
            Opcode::CallNative { duration, .. } => cost = *duration,
            Opcode::Alloc { bytes, native } => {
                let site = self.mem_site(tid, *native);
                let effect = hooks.on_alloc(*bytes, &site)?;
                self.push(tid, effect.address as i64);
                if let Some(kind) = effect.notify {
                    self.notify(kind);
                }
            }
            Opcode::Free => {
                let address = self.pop(tid)? as u64;
                let site = self.mem_site(tid, false);
                let effect = hooks.on_free(address, &site);
                if !effect.released {
                    self.state.diagnostics.invalid_frees += 1;
                }
                if let Some(kind) = effect.notify {
                    self.notify(kind);
                }
            }
            Opcode::Copy(n) => {
                let site = self.mem_site(tid, false);
                if let Some(kind) = hooks.on_copy(*n, &site) {
                    self.notify(kind);
                }
            }
            Opcode::Spawn(f) => {
                let id = self.state.threads.len();
                let mut t = ThreadRec::new(id, *f);
                if program.function(*f).is_empty() {
                    t.alive = false;
                    t.frames.clear();
                }
                self.state.threads.push(t);
                self.push(tid, id as i64);
            }
            Opcode::Join(target) => {
                let target = *target;
                let target_alive = target != tid && self.state.threads.get(target).is_some_and(|t| t.alive);
                let patch = self.state.join_patch;
                let clock_after = self.state.clock + cost;
                let t = &mut self.state.threads[tid];
                t.status = ThreadStatus::Executing;
                if target_alive {
                    // Re-executed after every wake-up until the target exits.
                    t.frames.last_mut().unwrap().pc = index;
                    match patch {
                        Some(interval) => {
                            t.status = ThreadStatus::Sleeping;
                            t.wait = Wait::Join { target, until: Some(clock_after + interval) };
                        }
                        None => t.wait = Wait::Join { target, until: None },
                    }
                }
            }
            Opcode::Ret => {
                self.advance(cost);
                self.return_from_frame(tid);
                return Ok(());
            }
            Opcode::Halt => {
                self.state.halted = true;
            }
        }
        self.advance(cost);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: VmState,
}

/// Runs `program` to completion.
pub fn run(program: &Program, hooks: &mut dyn Hooks, config: VmConfig) -> Result<RunOutput, VmError> {
    run_with(program, hooks, config, |_| {})
}

/// Like [`run`], with a chance to configure the machine (for example to
/// patch `JOIN`) before the first step.
pub fn run_with(
    program: &Program,
    hooks: &mut dyn Hooks,
    config: VmConfig,
    setup: impl FnOnce(&mut Machine<'_>),
) -> Result<RunOutput, VmError> {
    if config.clock_mode == ClockMode::Wall {
        return Err(VmError::Unsupported("wall-clock mode"));
    }
    let mut vm = Machine::new(program, config);
    setup(&mut vm);
    while !vm.state.halted {
        vm.step(hooks)?;
    }
    Ok(RunOutput { state: vm.into_state() })
}
