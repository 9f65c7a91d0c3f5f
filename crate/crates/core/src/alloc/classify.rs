//! Decides whether a sampled allocation came from the interpreter or from
//! native code by looking at function names near the top of its stack.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

pub const DEFAULT_MAX_DEPTH: usize = 4;
pub const INTERPRETER_PREFIXES: [&str; 2] = ["Vm_", "_Vm"];
/// Interpreter-named functions that allocate on behalf of native code.
pub const DEFAULT_NATIVE_OVERRIDES: [&str; 2] = ["_VmCFunction", "VmArray"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Python,
    Native,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Interpreter,
    NativeOverride,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifierRules {
    pub max_depth: usize,
    pub native_overrides: Vec<String>,
}

impl Default for ClassifierRules {
    fn default() -> Self {
        ClassifierRules {
            max_depth: DEFAULT_MAX_DEPTH,
            native_overrides: DEFAULT_NATIVE_OVERRIDES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ClassifierRules {
    pub fn frame_kind(&self, function: &str) -> FrameKind {
        if self.native_overrides.iter().any(|p| function.starts_with(p.as_str())) {
            FrameKind::NativeOverride
        } else if INTERPRETER_PREFIXES.iter().any(|p| function.starts_with(p)) {
            FrameKind::Interpreter
        } else {
            FrameKind::Other
        }
    }

    /// Walks from the innermost frame outwards. An override frame settles
    /// the answer as native; an interpreter frame settles it as python.
    pub fn classify_with(&self, stack: &[&str], mut kind_of: impl FnMut(&str) -> FrameKind) -> Provenance {
        for name in stack.iter().rev().take(self.max_depth) {
            match kind_of(name) {
                FrameKind::Interpreter => return Provenance::Python,
                FrameKind::NativeOverride => return Provenance::Native,
                FrameKind::Other => {}
            }
        }
        Provenance::Native
    }

    pub fn classify_uncached(&self, stack: &[&str]) -> Provenance {
        self.classify_with(stack, |n| self.frame_kind(n))
    }
}

/// Open-addressed, linearly probed memo of per-frame classification.
#[derive(Debug, Clone)]
pub struct ClassifierCache {
    slots: Vec<Option<(u64, Box<str>, FrameKind)>>,
    len: usize,
    hits: u64,
    misses: u64,
}

impl Default for ClassifierCache {
    fn default() -> Self {
        Self::with_capacity(64)
    }
}

impl ClassifierCache {
    pub fn with_capacity(capacity: usize) -> Self {
        ClassifierCache { slots: vec![None; capacity.max(8).next_power_of_two()], len: 0, hits: 0, misses: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    fn hash(name: &str) -> u64 {
        let mut h = DefaultHasher::new();
        name.hash(&mut h);
        h.finish()
    }

    fn probe(&self, hash: u64, name: &str) -> usize {
        let mask = self.slots.len() - 1;
        let mut i = hash as usize & mask;
        loop {
            match &self.slots[i] {
                Some((h, n, _)) if *h == hash && &**n == name => return i,
                None => return i,
                _ => i = (i + 1) & mask,
            }
        }
    }

    pub fn frame_kind(&mut self, rules: &ClassifierRules, name: &str) -> FrameKind {
        let hash = Self::hash(name);
        let i = self.probe(hash, name);
        if let Some(kind) = self.slots[i].as_ref().map(|slot| slot.2) {
            self.hits += 1;
            return kind;
        }
        self.misses += 1;
        let kind = rules.frame_kind(name);
        self.slots[i] = Some((hash, name.into(), kind));
        self.len += 1;
        if self.len * 2 > self.slots.len() {
            self.grow();
        }
        kind
    }

    fn grow(&mut self) {
        let doubled = vec![None; self.slots.len() * 2];
        let old = std::mem::replace(&mut self.slots, doubled);
        for (hash, name, kind) in old.into_iter().flatten() {
            let i = self.probe(hash, &name);
            self.slots[i] = Some((hash, name, kind));
        }
    }
}

pub fn classify_allocation_stack(stack: &[&str], rules: &ClassifierRules, cache: &mut ClassifierCache) -> Provenance {
    rules.classify_with(stack, |n| cache.frame_kind(rules, n))
}
