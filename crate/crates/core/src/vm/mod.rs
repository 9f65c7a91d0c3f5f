//! The miniature bytecode VM being profiled.

mod machine;
mod program;

pub use machine::{
    run, run_with, AllocEffect, ClockMode, Frame, FrameInfo, FrameStack, FreeEffect, Hooks, Machine, MemSite, NoHooks,
    NotificationKind, RunOutput, StepOutcome, ThreadRec, ThreadStatus, VmConfig, VmDiagnostics, VmError, VmState,
    MAIN_THREAD,
};
pub use program::{
    parse_program, parse_program_in, DisasmRow, FuncId, Function, LineId, Opcode, ParseError, ParseErrorKind, Program,
    ThreadId,
};

#[cfg(test)]
mod tests;
