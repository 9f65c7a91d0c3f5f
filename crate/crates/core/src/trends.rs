//! Bounded footprint history rendered as a sparkline.
//!
//! When the buffer fills, each consecutive triple is replaced by its median,
//! shrinking it to a third. Older history ends up smoothed more heavily than
//! recent samples.

pub const DEFAULT_CAPACITY: usize = 27;

pub const GLYPHS: [char; 8] = ['▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparklineBuffer {
    capacity: usize,
    entries: Vec<u64>,
}

impl Default for SparklineBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl SparklineBuffer {
    /// # Panics
    /// If `capacity` is zero or not a multiple of 3.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0 && capacity.is_multiple_of(3), "capacity must be a positive multiple of 3");
        SparklineBuffer { capacity, entries: Vec::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[u64] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max(&self) -> Option<u64> {
        self.entries.iter().copied().max()
    }

    pub fn push_footprint(&mut self, value: u64) {
        if self.entries.len() == self.capacity {
            self.reduce_by_median();
        }
        self.entries.push(value);
    }

    /// # Panics
    /// If the length is not a multiple of 3.
    pub fn reduce_by_median(&mut self) {
        assert!(
            self.entries.len().is_multiple_of(3),
            "reduce_by_median needs a multiple of 3 entries, got {}",
            self.entries.len()
        );
        let reduced: Vec<u64> = self.entries.chunks_exact(3).map(|t| median3(t[0], t[1], t[2])).collect();
        self.entries = reduced;
    }

    /// One glyph per entry, scaled to the buffer maximum. Only the most
    /// recent `width` entries are shown; shorter output is space-padded.
    pub fn render(&self, width: usize) -> String {
        render_sparkline(self, width)
    }
}

pub fn median3(a: u64, b: u64, c: u64) -> u64 {
    a.max(b).min(a.min(b).max(c))
}

pub fn glyph_level(value: u64, max: u64) -> usize {
    if max == 0 {
        return 0;
    }
    let top = (GLYPHS.len() - 1) as u128;
    ((value.min(max) as u128 * top * 2 + max as u128) / (max as u128 * 2)) as usize
}

pub fn render_sparkline(buffer: &SparklineBuffer, width: usize) -> String {
    assert!(width >= 1, "width must be at least 1");
    let Some(max) = buffer.max() else {
        return String::new();
    };
    let shown = &buffer.entries[buffer.len().saturating_sub(width)..];
    let mut out: String = shown.iter().map(|&v| GLYPHS[glyph_level(v, max)]).collect();
    out.extend(std::iter::repeat_n(' ', width - shown.len()));
    out
}
