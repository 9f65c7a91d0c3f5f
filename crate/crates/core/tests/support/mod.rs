//! Scenarios shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use miniprof::alloc::{HeapConfig, Release, SamplingAllocator, SamplingConfig};
use miniprof::channel::Record;
use miniprof::trends::{SparklineBuffer, DEFAULT_CAPACITY};
use miniprof::vm::LineId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STACK: [&str; 2] = ["main", "Vm_ObjectAlloc"];

#[derive(Debug, Default)]
pub struct FuzzOutcome {
    pub ops: u64,
    pub allocations: u64,
    pub frees: u64,
    pub foreign_frees: u64,
    /// Foreign or repeated frees that the heap nevertheless released.
    pub bad_releases: u64,
    /// Legitimate frees that the heap refused or sized wrongly.
    pub lost_frees: u64,
    pub overlaps: u64,
    pub footprint_mismatches: u64,
}

impl FuzzOutcome {
    pub fn clean(&self) -> bool {
        self.bad_releases == 0 && self.lost_frees == 0 && self.overlaps == 0 && self.footprint_mismatches == 0
    }
}

fn size(rng: &mut ChaCha8Rng) -> u64 {
    match rng.random_range(0..100) {
        0..70 => rng.random_range(1..=512),
        70..95 => rng.random_range(513..=16_384),
        _ => rng.random_range(16_385..=1 << 20),
    }
}

fn overlaps(live: &BTreeMap<u64, u64>, addr: u64, size: u64) -> bool {
    let before = live.range(..=addr).next_back().is_some_and(|(&a, &s)| a + s > addr);
    let after = live.range(addr..).next().is_some_and(|(&a, _)| a < addr + size);
    before || after
}

/// Mixed allocate / free / foreign free / copy traffic checked against a
/// map of live objects.
pub fn allocator_fuzz(ops: u64, seed: u64) -> FuzzOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = SamplingAllocator::new(HeapConfig::default(), SamplingConfig::default()).unwrap();
    let mut sink: Vec<Record> = Vec::new();
    let line = LineId::new("fuzz.asm", 1);
    let mut live: BTreeMap<u64, u64> = BTreeMap::new();
    let mut order: Vec<u64> = Vec::new();
    let mut freed: HashSet<u64> = HashSet::new();
    let mut out = FuzzOutcome::default();
    let mut footprint = 0u64;

    for step in 0..ops {
        out.ops += 1;
        let roll = rng.random_range(0..100);
        if roll < 45 && order.len() < 4_000 || order.is_empty() && roll < 80 {
            let n = size(&mut rng);
            let (addr, _) = a.allocate(n, &STACK, &line, &mut sink).unwrap();
            if overlaps(&live, addr, n) {
                out.overlaps += 1;
            }
            live.insert(addr, n);
            order.push(addr);
            freed.remove(&addr);
            footprint += n;
            out.allocations += 1;
        } else if roll < 80 && !order.is_empty() {
            let addr = order.swap_remove(rng.random_range(0..order.len()));
            let n = live.remove(&addr).unwrap();
            match a.deallocate(addr, &line, &mut sink).0 {
                Release::Released { size } if size == n => {}
                _ => out.lost_frees += 1,
            }
            freed.insert(addr);
            footprint -= n;
            out.frees += 1;
        } else if roll < 95 {
            let addr = foreign_address(&mut rng, &live, &order, &freed);
            if a.deallocate(addr, &line, &mut sink).0 != Release::ForeignIgnored {
                out.bad_releases += 1;
            }
            out.foreign_frees += 1;
        } else {
            a.copy_bytes(rng.random_range(1..=1 << 16), &line, &mut sink);
        }
        if a.state().footprint != footprint {
            out.footprint_mismatches += 1;
        }
        if step % 100_000 == 0 {
            sink.clear();
        }
    }
    out
}

fn foreign_address(rng: &mut ChaCha8Rng, live: &BTreeMap<u64, u64>, order: &[u64], freed: &HashSet<u64>) -> u64 {
    loop {
        let addr = match rng.random_range(0..5) {
            0 => rng.random(),
            1 => rng.random::<u64>() & !0xfff,
            2 if !order.is_empty() => order[rng.random_range(0..order.len())] + rng.random_range(1..16),
            3 if !order.is_empty() => order[rng.random_range(0..order.len())] + 4096,
            4 if !freed.is_empty() => *freed.iter().nth(rng.random_range(0..freed.len().min(64))).unwrap(),
            _ => continue,
        };
        if !live.contains_key(&addr) {
            return addr;
        }
    }
}

/// Ten frees of addresses the allocator never issued, before it has issued
/// anything, then ordinary use.
pub fn foreign_frees_at_startup() -> Result<(), String> {
    let mut a = SamplingAllocator::new(HeapConfig::default(), SamplingConfig::default()).unwrap();
    let mut sink: Vec<Record> = Vec::new();
    let line = LineId::new("start.asm", 1);
    let small = a.heap().small_region().start;
    let bogus = [0, 8, 0x1000, 0xdead_beef, small, small + 16, small + 4096, u64::MAX, !0xfff, 1 << 47];
    for addr in bogus {
        if a.deallocate(addr, &line, &mut sink).0 != Release::ForeignIgnored {
            return Err(format!("foreign free of {addr:#x} was released"));
        }
    }
    if a.state().footprint != 0 || a.heap().stats().released != 0 {
        return Err("foreign frees changed the footprint".into());
    }
    let x = a.allocate(64, &STACK, &line, &mut sink).unwrap().0;
    let y = a.allocate(8192, &STACK, &line, &mut sink).unwrap().0;
    let ok = a.deallocate(x, &line, &mut sink).0 == Release::Released { size: 64 }
        && a.deallocate(y, &line, &mut sink).0 == Release::Released { size: 8192 }
        && a.state().footprint == 0;
    ok.then_some(()).ok_or_else(|| "allocator misbehaved after foreign frees".into())
}

/// Straightforward model: when full, sort each consecutive triple and keep
/// its middle element.
pub struct Reference {
    pub values: Vec<u64>,
}

impl Reference {
    pub fn push(&mut self, v: u64) {
        if self.values.len() == DEFAULT_CAPACITY {
            self.values = self
                .values
                .chunks(3)
                .map(|c| {
                    let mut c = c.to_vec();
                    c.sort_unstable();
                    c[1]
                })
                .collect();
        }
        self.values.push(v);
    }

    pub fn render(&self, width: usize) -> String {
        const RAMP: &str = "▁▂▃▄▅▆▇█";
        let Some(&max) = self.values.iter().max() else { return String::new() };
        let ramp: Vec<char> = RAMP.chars().collect();
        let start = self.values.len().saturating_sub(width);
        let mut s: String = self.values[start..]
            .iter()
            .map(|&v| if max == 0 { ramp[0] } else { ramp[(v as f64 * 7.0 / max as f64 + 0.5).floor() as usize] })
            .collect();
        while s.chars().count() < width {
            s.push(' ');
        }
        s
    }
}

/// Runs `cases` random push sequences through both the buffer and the
/// reference, comparing contents after every push and the final rendering.
pub fn sparkline_reference_check(cases: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let mut buf = SparklineBuffer::default();
        let mut model = Reference { values: Vec::new() };
        let n = rng.random_range(0..=200);
        let spread: u64 = if case % 4 == 0 { 8 } else { 1 << 32 };
        for i in 0..n {
            let v = rng.random_range(0..spread);
            buf.push_footprint(v);
            model.push(v);
            if buf.len() > DEFAULT_CAPACITY {
                return Err(format!("case {case}: length {} after push {i}", buf.len()));
            }
            if buf.entries() != &model.values[..] {
                return Err(format!("case {case}: contents differ after push {i}"));
            }
        }
        let width = rng.random_range(1..=40);
        if buf.render(width) != model.render(width) {
            return Err(format!("case {case}: rendering differs at width {width}"));
        }
    }
    Ok(())
}
