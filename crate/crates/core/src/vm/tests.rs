use proptest::prelude::*;

use super::*;
use crate::units::Nanos;

#[derive(Debug, Clone, PartialEq, Eq)]
struct Delivery {
    kind: NotificationKind,
    clock: Nanos,
    holder: ThreadId,
}

#[derive(Default)]
struct Recorder {
    deliveries: Vec<Delivery>,
}

impl Hooks for Recorder {
    fn on_notification(&mut self, kind: NotificationKind, vm: &Machine<'_>) {
        self.deliveries.push(Delivery { kind, clock: vm.clock(), holder: vm.state().gil_holder() });
    }
}

fn no_timer() -> VmConfig {
    VmConfig { quantum: None, ..VmConfig::default() }
}

fn countdown(iterations: u64) -> String {
    // 3N + 4 opcodes in total.
    format!(
        ".func main\n.line 1\nPUSH {iterations}\ntop:\n.line 2\nPUSH -1\nADD\nJNZ top\n.line 3\nPOP\nPUSH 0\nHALT\n"
    )
}

#[test]
fn opcode_costs_sum_exactly() {
    // 50 pushes, 49 adds and a halt: 100 opcodes.
    let mut src = String::from(".func main\n.line 1\n");
    for _ in 0..50 {
        src.push_str("PUSH 1\n");
    }
    for _ in 0..49 {
        src.push_str("ADD\n");
    }
    src.push_str("HALT\n");
    let p = parse_program(&src).unwrap();
    let out = run(&p, &mut NoHooks, no_timer()).unwrap();
    assert_eq!(out.state.clock(), Nanos::from_millis(1));
    assert_eq!(out.state.diagnostics.steps, 100);
}

#[test]
fn timer_count_matches_direct_simulation() {
    let p = parse_program(&countdown(33_332)).unwrap();
    let mut rec = Recorder::default();
    let out = run(&p, &mut rec, VmConfig::default()).unwrap();
    assert_eq!(out.state.clock(), Nanos::from_secs(1));

    // Oracle: walk the opcode end times and count deliveries, one per
    // boundary at which at least one multiple of q has been crossed.
    let q = 10_000_000u64;
    let mut expected = 0;
    let mut next = q;
    for k in 1..=(3 * 33_332 + 4u64) {
        let t = k * 10_000;
        if next <= t {
            expected += 1;
            while next <= t {
                next += q;
            }
        }
    }
    assert_eq!(expected, 100);
    assert_eq!(rec.deliveries.len(), expected);
    assert!(rec.deliveries.iter().all(|d| d.kind == NotificationKind::Timer));
}

#[test]
fn notification_is_delivered_after_the_next_opcode() {
    let p = parse_program(".func main\n.line 1\nPUSH 1\nPUSH 2\nADD\nHALT\n").unwrap();
    let mut vm = Machine::new(&p, no_timer());
    let mut rec = Recorder::default();
    vm.step(&mut rec).unwrap();
    vm.step(&mut rec).unwrap();
    vm.notify(NotificationKind::Timer);
    assert!(rec.deliveries.is_empty());
    let before = vm.clock();
    vm.step(&mut rec).unwrap(); // ADD
    assert_eq!(rec.deliveries.len(), 1);
    assert_eq!(rec.deliveries[0].clock, before + Nanos::from_micros(10));
}

#[test]
fn native_call_delays_delivery_by_its_duration() {
    let p = parse_program(".func main\n.line 1\nPUSH 1\nCALL_NATIVE work 1.0\nHALT\n").unwrap();
    let mut vm = Machine::new(&p, no_timer());
    let mut rec = Recorder::default();
    vm.step(&mut rec).unwrap();
    let start = vm.clock();
    vm.notify(NotificationKind::Timer);
    vm.step(&mut rec).unwrap();
    assert_eq!(rec.deliveries.len(), 1);
    assert!(rec.deliveries[0].clock - start >= Nanos::from_secs(1));
}

#[test]
fn same_kind_notifications_coalesce_during_native_call() {
    let p = parse_program(".func main\n.line 1\nCALL_NATIVE work 1.0\nHALT\n").unwrap();
    let mut rec = Recorder::default();
    let out = run(&p, &mut rec, VmConfig::default()).unwrap();
    let timers: Vec<_> = rec.deliveries.iter().filter(|d| d.kind == NotificationKind::Timer).collect();
    // One delivery after the call; the timer is re-armed for 1.01 s, past HALT.
    assert_eq!(timers.len(), 1);
    assert_eq!(timers[0].clock, Nanos::from_secs(1));
    assert_eq!(out.state.diagnostics.expired_while_pending, 99);

    let mut vm = Machine::new(&p, no_timer());
    let mut rec = Recorder::default();
    vm.notify(NotificationKind::Malloc);
    vm.notify(NotificationKind::Malloc);
    vm.step(&mut rec).unwrap();
    assert_eq!(rec.deliveries.len(), 1);
    assert_eq!(rec.deliveries[0].clock, Nanos::from_secs(1));
    assert_eq!(vm.state().diagnostics.coalesced, 1);
}

#[test]
fn distinct_kinds_are_each_delivered_once() {
    let p = parse_program(".func main\n.line 1\nPUSH 1\nHALT\n").unwrap();
    let mut vm = Machine::new(&p, no_timer());
    let mut rec = Recorder::default();
    vm.notify(NotificationKind::Malloc);
    vm.notify(NotificationKind::Timer);
    vm.notify(NotificationKind::Malloc);
    vm.step(&mut rec).unwrap();
    let kinds: Vec<_> = rec.deliveries.iter().map(|d| d.kind).collect();
    assert_eq!(kinds, vec![NotificationKind::Malloc, NotificationKind::Timer]);
}

#[test]
fn enumerate_threads_tracks_spawn_and_sleep() {
    let src = "\
.func main
.line 1
SPAWN child
JOIN 1
HALT
.func child
.line 5
PUSH 2000
top:
PUSH -1
ADD
JNZ top
RET
";
    let p = parse_program(src).unwrap();
    let mut vm = Machine::new(&p, VmConfig::default());
    assert_eq!(vm.enumerate_threads(), vec![(0, ThreadStatus::Executing)]);
    vm.patch_blocking_join(Nanos::from_millis(5));
    vm.step(&mut NoHooks).unwrap(); // SPAWN
    assert_eq!(vm.enumerate_threads().len(), 2);
    vm.step(&mut NoHooks).unwrap(); // JOIN begins a bounded wait
    assert_eq!(vm.enumerate_threads()[0], (0, ThreadStatus::Sleeping));
    while !vm.state().is_halted() {
        vm.step(&mut NoHooks).unwrap();
    }
    assert_eq!(vm.enumerate_threads(), vec![(0, ThreadStatus::Executing)]);
}

#[test]
fn current_frames_are_snapshots() {
    let src = "\
.entry f
.func f
.line 1
CALL g
HALT
.func g
.line 2
PUSH 1
PUSH 2
RET
";
    let p = parse_program(src).unwrap();
    let mut vm = Machine::new(&p, no_timer());
    assert_eq!(vm.current_frames(0).unwrap().len(), 1);
    vm.step(&mut NoHooks).unwrap();
    let snap = vm.current_frames(0).unwrap();
    let names: Vec<&str> = snap.iter().map(|f| &*f.function).collect();
    assert_eq!(names, vec!["f", "g"]);
    assert_eq!(snap[0].line.line, 1);
    let copy = snap.clone();
    vm.step(&mut NoHooks).unwrap();
    vm.step(&mut NoHooks).unwrap();
    assert_eq!(snap, copy);
    assert_ne!(vm.current_frames(0).unwrap(), snap);
    assert_eq!(vm.current_frames(7), Err(VmError::UnknownThread(7)));
}

#[test]
fn frame_reports_the_opcode_in_progress() {
    let p = parse_program(".func main\n.line 3\nCALL_NATIVE x 0.5\n.line 4\nPUSH 1\nHALT\n").unwrap();
    let mut vm = Machine::new(&p, no_timer());
    vm.step(&mut NoHooks).unwrap();
    let f = &vm.current_frames(0).unwrap()[0];
    assert_eq!((f.index, f.line.line), (0, 3));
}

#[test]
fn delivery_only_on_main_thread() {
    let src = "\
.func main
.line 1
SPAWN spin
SPAWN spin
PUSH 30000
top:
.line 2
PUSH -1
ADD
JNZ top
HALT
.func spin
.line 10
PUSH 1
loop:
JNZ loop
";
    let p = parse_program(src).unwrap();
    let mut rec = Recorder::default();
    run(&p, &mut rec, VmConfig::default()).unwrap();
    assert!(!rec.deliveries.is_empty());
    assert!(rec.deliveries.iter().all(|d| d.holder == MAIN_THREAD));
}

#[test]
fn pure_bytecode_delay_is_below_one_opcode() {
    let p = parse_program(&countdown(20_000)).unwrap();
    let config = VmConfig { timer_offset: Nanos(3_333), ..VmConfig::default() };
    let mut rec = Recorder::default();
    run(&p, &mut rec, config).unwrap();
    let q = 10_000_000u64;
    for d in &rec.deliveries {
        let tick = (d.clock.0 - 3_333) / q * q + 3_333;
        assert!(d.clock.0 - tick < 10_000, "delay {} at {}", d.clock.0 - tick, d.clock);
    }
}

#[test]
fn unpatched_join_blocks_delivery_until_child_exits() {
    let src = "\
.func main
.line 1
SPAWN child
.line 2
JOIN 1
.line 3
HALT
.func child
.line 9
PUSH 1000
top:
CALL_NATIVE step 0.001
PUSH -1
ADD
JNZ top
RET
";
    let p = parse_program(src).unwrap();
    let mut vm = Machine::new(&p, VmConfig::default());
    let mut rec = Recorder::default();
    vm.step(&mut rec).unwrap();
    vm.step(&mut rec).unwrap();
    let join_start = vm.clock();
    let mut join_end = None;
    while !vm.state().is_halted() {
        let was_blocked = vm.state().threads()[1].alive;
        vm.step(&mut rec).unwrap();
        if was_blocked && !vm.state().threads()[1].alive {
            join_end = Some(vm.clock());
        }
    }
    let join_end = join_end.unwrap();
    assert!(join_end - join_start >= Nanos::from_secs(1));
    let during = rec.deliveries.iter().filter(|d| d.clock > join_start && d.clock <= join_end).count();
    assert_eq!(during, 0);
    // The pending tick arrives once main runs again.
    assert_eq!(rec.deliveries.len(), 1);
}

#[test]
fn patched_join_keeps_main_reaching_boundaries() {
    let src = "\
.func main
.line 1
SPAWN child
.line 2
JOIN 1
.line 3
HALT
.func child
.line 9
PUSH 1000
top:
CALL_NATIVE step 0.001
PUSH -1
ADD
JNZ top
RET
";
    let p = parse_program(src).unwrap();
    let mut rec = Recorder::default();
    let config = VmConfig::default();
    let interval = config.switch_interval;
    let out = run_with(&p, &mut rec, config, |vm| vm.patch_blocking_join(interval)).unwrap();
    let timers = rec.deliveries.iter().filter(|d| d.kind == NotificationKind::Timer).count();
    assert!(timers >= 100, "only {timers} timer deliveries");
    assert!(out.state.clock() >= Nanos::from_secs(1));
}

#[test]
fn join_on_exited_thread_returns_immediately() {
    let src = ".func main\n.line 1\nSPAWN quick\nPUSH 0\nPOP\nPUSH 0\nPOP\nJOIN 1\nHALT\n.func quick\n.line 5\nRET\n";
    let p = parse_program(src).unwrap();
    let mut vm = Machine::new(&p, VmConfig { switch_interval: Nanos(1), ..no_timer() });
    vm.patch_blocking_join(Nanos::from_millis(5));
    let mut saw_sleep = false;
    while !vm.state().is_halted() {
        vm.step(&mut NoHooks).unwrap();
        saw_sleep |= vm.state().threads()[0].status == ThreadStatus::Sleeping;
    }
    assert!(!vm.state().threads()[1].alive);
    assert!(!saw_sleep);
}

#[test]
fn runaway_guard_aborts() {
    let p = parse_program(".func main\n.line 1\ntop:\nJMP top\n").unwrap();
    let config = VmConfig { max_time: Nanos::from_millis(100), ..VmConfig::default() };
    assert!(matches!(run(&p, &mut NoHooks, config), Err(VmError::Runaway(_))));
}

#[test]
fn stack_underflow_is_an_error() {
    let p = parse_program(".func main\n.line 1\nADD\n").unwrap();
    let e = run(&p, &mut NoHooks, no_timer()).unwrap_err();
    assert_eq!(e, VmError::StackUnderflow { function: "main".into(), index: 0 });
}

#[test]
fn self_join_without_patch_deadlocks() {
    let p = parse_program(".func main\n.line 1\nSPAWN w\nJOIN 1\nHALT\n.func w\n.line 2\nJOIN 0\n").unwrap();
    assert!(matches!(run(&p, &mut NoHooks, no_timer()), Err(VmError::Deadlock(_))));
}

#[test]
fn wall_clock_mode_is_rejected() {
    let p = parse_program(".func main\n.line 1\nHALT\n").unwrap();
    let config = VmConfig { clock_mode: ClockMode::Wall, ..VmConfig::default() };
    assert_eq!(run(&p, &mut NoHooks, config).unwrap_err(), VmError::Unsupported("wall-clock mode"));
}

#[test]
fn empty_entry_halts_immediately() {
    let p = parse_program(".func main\n").unwrap();
    let out = run(&p, &mut NoHooks, no_timer()).unwrap();
    assert_eq!(out.state.clock(), Nanos::ZERO);
}

#[test]
fn repeated_runs_are_identical() {
    let src = "\
.func main
.line 1
SPAWN child
PUSH 300
top:
.line 2
CALL_NATIVE a 0.0031
ALLOC 64
FREE
PUSH -1
ADD
JNZ top
JOIN 1
HALT
.func child
.line 8
PUSH 500
l:
PUSH -1
ADD
JNZ l
RET
";
    let p = parse_program(src).unwrap();
    let go = || {
        let mut rec = Recorder::default();
        let config = VmConfig { timer_offset: Nanos(1_234_567), ..VmConfig::default() };
        let out = run_with(&p, &mut rec, config, |vm| vm.patch_blocking_join(Nanos::from_millis(5))).unwrap();
        (rec.deliveries, out.state.clock(), out.state.diagnostics)
    };
    assert_eq!(go(), go());
}

fn arb_program() -> impl Strategy<Value = Program> {
    let names = ["main", "f", "Vm_helper"];
    (1usize..=3)
        .prop_flat_map(move |nfuncs| {
            let op = (0u8..14, any::<i32>(), 0u64..5_000, any::<bool>(), 0usize..nfuncs, 1u32..40, 0usize..2);
            (Just(nfuncs), proptest::collection::vec(op, 1..=20))
        })
        .prop_map(move |(nfuncs, ops)| {
            let mut funcs: Vec<Function> =
                (0..nfuncs).map(|i| Function { name: names[i].into(), code: vec![], lines: vec![] }).collect();
            for (i, (tag, k, n, flag, target_fn, line, file)) in ops.into_iter().enumerate() {
                let fi = i % nfuncs;
                let op = match tag {
                    0 => Opcode::Push(k as i64),
                    1 => Opcode::Pop,
                    2 => Opcode::Add,
                    3 => Opcode::Jmp(0),
                    4 => Opcode::Jnz(0),
                    5 => Opcode::Call(target_fn),
                    6 => Opcode::CallNative { name: format!("n{n}"), duration: Nanos(n * 1_000) },
                    7 => Opcode::Alloc { bytes: n, native: flag },
                    8 => Opcode::Free,
                    9 => Opcode::Copy(n),
                    10 => Opcode::Spawn(target_fn),
                    11 => Opcode::Join(n as usize % 4),
                    12 => Opcode::Ret,
                    _ => Opcode::Halt,
                };
                let file = ["a.asm", "lib.asm"][file];
                funcs[fi].code.push(op);
                funcs[fi].lines.push(LineId::new(file, line));
            }
            Program::new(funcs, 0).expect("generated program is valid")
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn render_then_parse_is_identity(p in arb_program()) {
        let text = p.render();
        let back = parse_program(&text).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn listing_matches_opcode_count(p in arb_program()) {
        let rows = p.disassemble();
        prop_assert_eq!(rows.len(), p.opcode_count());
        let natives = p.functions().iter().flat_map(|f| &f.code)
            .filter(|op| matches!(op, Opcode::CallNative { .. })).count();
        prop_assert_eq!(rows.iter().filter(|r| r.name.starts_with("CALL_")).count(), natives);
    }
}
