//! Bookkeeping of matrix and grid allocations.
//!
//! Solvers register the large buffers they hold so runs can report a peak
//! working-set size that does not depend on the allocator or platform.

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryLedger {
    current: usize,
    peak: usize,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, bytes: usize) {
        self.current += bytes;
        self.peak = self.peak.max(self.current);
    }

    pub fn free(&mut self, bytes: usize) {
        self.current = self.current.saturating_sub(bytes);
    }

    /// Records a temporary buffer that is released right away.
    pub fn transient(&mut self, bytes: usize) {
        self.alloc(bytes);
        self.free(bytes);
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

/// Bytes of an `rows x cols` matrix of `f64`.
pub fn matrix_bytes(rows: usize, cols: usize) -> usize {
    rows * cols * std::mem::size_of::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_high_water_mark() {
        let mut ledger = MemoryLedger::new();
        ledger.alloc(100);
        ledger.alloc(50);
        ledger.free(120);
        ledger.transient(60);
        assert_eq!(ledger.current(), 30);
        assert_eq!(ledger.peak(), 150);
        ledger.transient(200);
        assert_eq!(ledger.peak(), 230);
    }
}
