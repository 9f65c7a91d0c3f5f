//! The sampling replacement allocator.

mod classify;
mod heap;
mod sampling;

pub use classify::{
    classify_allocation_stack, ClassifierCache, ClassifierRules, FrameKind, Provenance, DEFAULT_MAX_DEPTH,
    DEFAULT_NATIVE_OVERRIDES, INTERPRETER_PREFIXES,
};
pub use heap::{
    size_class_for, AllocError, Heap, HeapConfig, HeapStats, ObjectHeader, PageProvider, Release, SimulatedPages,
    SizeClass, DEFAULT_SMALL_REGION, MAGIC, MAX_SMALL, PAGE_SIZE, SLAB_SIZE,
};
pub use sampling::{
    Sampler, SamplingAllocator, SamplingConfig, SamplingState, CALLSTACK_DIVISOR, COPY_MULTIPLIER,
    DEFAULT_ALLOC_THRESHOLD,
};
