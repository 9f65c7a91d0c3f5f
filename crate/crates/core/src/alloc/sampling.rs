//! Byte-threshold sampling of allocations, frees and copies.

use crate::channel::{Record, RecordKind, RecordSink, PPM};
use crate::vm::LineId;

use super::classify::{classify_allocation_stack, ClassifierCache, ClassifierRules, Provenance};
use super::heap::{AllocError, Heap, HeapConfig, Release};

/// Smallest prime above 2^20.
pub const DEFAULT_ALLOC_THRESHOLD: u64 = 1_048_583;
pub const CALLSTACK_DIVISOR: u64 = 13;
pub const COPY_MULTIPLIER: u64 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingConfig {
    pub alloc_threshold: u64,
    pub callstack_divisor: u64,
    pub copy_multiplier: u64,
    pub rules: ClassifierRules,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            alloc_threshold: DEFAULT_ALLOC_THRESHOLD,
            callstack_divisor: CALLSTACK_DIVISOR,
            copy_multiplier: COPY_MULTIPLIER,
            rules: ClassifierRules::default(),
        }
    }
}

impl SamplingConfig {
    pub fn with_threshold(alloc_threshold: u64) -> Self {
        SamplingConfig { alloc_threshold: alloc_threshold.max(1), ..Default::default() }
    }

    /// Bytes of allocation between provenance samples.
    pub fn callstack_stride(&self) -> u64 {
        (self.alloc_threshold / self.callstack_divisor.max(1)).max(1)
    }

    pub fn copy_threshold(&self) -> u64 {
        self.alloc_threshold.saturating_mul(self.copy_multiplier.max(1))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SamplingState {
    /// Threshold counters; reduced modulo their threshold when they fire.
    pub alloc_accum: u64,
    pub free_accum: u64,
    pub copy_accum: u64,
    pub callstack_accum: u64,
    /// Bytes since the last record of each kind.
    pub pending_alloc: u64,
    pub pending_free: u64,
    pub pending_copy: u64,
    pub footprint: u64,
    pub peak: u64,
    /// Provenance of sampled allocations since the last malloc record.
    pub python_bytes: u64,
    pub total_bytes: u64,
    pub provenance_samples: u64,
    /// Fraction carried by the most recent malloc record, reused by frees.
    pub last_fraction_ppm: u32,
    pub in_handler: bool,
    pub records: [u64; 3],
    pub write_failures: u64,
}

impl SamplingState {
    pub fn record_count(&self, kind: RecordKind) -> u64 {
        self.records[kind as usize]
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sampler {
    config: SamplingConfig,
    state: SamplingState,
    cache: ClassifierCache,
    deferred: [Option<LineId>; 3],
}

impl Sampler {
    pub fn new(config: SamplingConfig) -> Self {
        Sampler { config, ..Default::default() }
    }

    pub fn config(&self) -> &SamplingConfig {
        &self.config
    }

    pub fn state(&self) -> &SamplingState {
        &self.state
    }

    pub fn cache(&self) -> &ClassifierCache {
        &self.cache
    }

    /// Accounts a successful allocation of `size` bytes whose call stack
    /// (outermost first) is `stack`.
    pub fn on_allocate(
        &mut self,
        size: u64,
        stack: &[&str],
        line: &LineId,
        sink: &mut dyn RecordSink,
    ) -> Option<RecordKind> {
        let s = &mut self.state;
        s.footprint += size;
        s.peak = s.peak.max(s.footprint);
        s.pending_alloc += size;
        s.callstack_accum += size;
        let stride = self.config.callstack_stride();
        // Every stride boundary the allocation covers is one sample of
        // its stack, each standing for `stride` bytes.
        let crossings = s.callstack_accum / stride;
        if crossings > 0 {
            s.callstack_accum %= stride;
            s.provenance_samples += crossings;
            s.total_bytes += crossings * stride;
            if classify_allocation_stack(stack, &self.config.rules, &mut self.cache) == Provenance::Python {
                self.state.python_bytes += crossings * stride;
            }
        }
        self.state.alloc_accum += size;
        self.maybe_emit(RecordKind::Malloc, line, sink)
    }

    pub fn on_free(&mut self, size: u64, line: &LineId, sink: &mut dyn RecordSink) -> Option<RecordKind> {
        let s = &mut self.state;
        s.footprint -= size;
        s.pending_free += size;
        s.free_accum += size;
        self.maybe_emit(RecordKind::Free, line, sink)
    }

    pub fn on_copy(&mut self, n: u64, line: &LineId, sink: &mut dyn RecordSink) -> Option<RecordKind> {
        if n == 0 {
            return None;
        }
        self.state.pending_copy += n;
        self.state.copy_accum += n;
        self.maybe_emit(RecordKind::Copy, line, sink)
    }

    /// Records crossing a threshold while the handler runs are held back
    /// until [`Sampler::exit_handler`].
    pub fn enter_handler(&mut self) {
        self.state.in_handler = true;
    }

    pub fn exit_handler(&mut self, sink: &mut dyn RecordSink) -> Vec<RecordKind> {
        self.state.in_handler = false;
        let mut emitted = Vec::new();
        for kind in [RecordKind::Malloc, RecordKind::Free, RecordKind::Copy] {
            if let Some(line) = self.deferred[kind as usize].take() {
                emitted.extend(self.maybe_emit(kind, &line, sink));
            }
        }
        emitted
    }

    fn threshold(&self, kind: RecordKind) -> u64 {
        match kind {
            RecordKind::Malloc | RecordKind::Free => self.config.alloc_threshold,
            RecordKind::Copy => self.config.copy_threshold(),
        }
    }

    fn maybe_emit(&mut self, kind: RecordKind, line: &LineId, sink: &mut dyn RecordSink) -> Option<RecordKind> {
        let threshold = self.threshold(kind);
        let s = &mut self.state;
        let accum = match kind {
            RecordKind::Malloc => &mut s.alloc_accum,
            RecordKind::Free => &mut s.free_accum,
            RecordKind::Copy => &mut s.copy_accum,
        };
        if *accum < threshold {
            return None;
        }
        if s.in_handler {
            self.deferred[kind as usize] = Some(line.clone());
            return None;
        }
        let crossings = *accum / threshold;
        *accum %= threshold;
        let (bytes, ppm) = match kind {
            RecordKind::Malloc => {
                let ppm = if s.total_bytes == 0 {
                    0
                } else {
                    (s.python_bytes as u128 * PPM as u128 / s.total_bytes as u128) as u32
                };
                s.python_bytes = 0;
                s.total_bytes = 0;
                s.last_fraction_ppm = ppm;
                (std::mem::take(&mut s.pending_alloc), ppm)
            }
            RecordKind::Free => (std::mem::take(&mut s.pending_free), s.last_fraction_ppm),
            RecordKind::Copy => (std::mem::take(&mut s.pending_copy), 0),
        };
        // One record per threshold crossed. The first carries whatever is
        // left after the others take a full threshold each.
        let mut emitted = None;
        for i in 0..crossings {
            let bytes = if i == 0 { bytes.saturating_sub((crossings - 1) * threshold) } else { threshold };
            let record =
                Record { seq: 0, kind, bytes, python_fraction_ppm: ppm, footprint: s.footprint, line: line.clone() };
            s.in_handler = true;
            let written = sink.append(record);
            s.in_handler = false;
            match written {
                Ok(_) => {
                    s.records[kind as usize] += 1;
                    emitted = Some(kind);
                }
                Err(_) => s.write_failures += 1,
            }
        }
        emitted
    }
}

/// Heap plus sampling: the complete replacement allocator.
#[derive(Debug)]
pub struct SamplingAllocator {
    heap: Heap,
    sampler: Sampler,
}

impl SamplingAllocator {
    pub fn new(heap: HeapConfig, sampling: SamplingConfig) -> Result<Self, AllocError> {
        Ok(SamplingAllocator { heap: Heap::new(heap)?, sampler: Sampler::new(sampling) })
    }

    pub fn heap(&self) -> &Heap {
        &self.heap
    }

    pub fn sampler(&self) -> &Sampler {
        &self.sampler
    }

    pub fn sampler_mut(&mut self) -> &mut Sampler {
        &mut self.sampler
    }

    pub fn state(&self) -> &SamplingState {
        self.sampler.state()
    }

    pub fn allocate(
        &mut self,
        size: u64,
        stack: &[&str],
        line: &LineId,
        sink: &mut dyn RecordSink,
    ) -> Result<(u64, Option<RecordKind>), AllocError> {
        let address = self.heap.allocate(size)?;
        Ok((address, self.sampler.on_allocate(size, stack, line, sink)))
    }

    pub fn deallocate(
        &mut self,
        address: u64,
        line: &LineId,
        sink: &mut dyn RecordSink,
    ) -> (Release, Option<RecordKind>) {
        match self.heap.deallocate(address) {
            Release::Released { size } => (Release::Released { size }, self.sampler.on_free(size, line, sink)),
            Release::ForeignIgnored => (Release::ForeignIgnored, None),
        }
    }

    pub fn copy_bytes(&mut self, n: u64, line: &LineId, sink: &mut dyn RecordSink) -> Option<RecordKind> {
        self.sampler.on_copy(n, line, sink)
    }
}
