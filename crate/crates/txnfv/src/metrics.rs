//! Execution-time accounting.
//!
//! Every worker (and the coordinating thread) splits its wall time into six
//! categories. The categories are cumulative nanosecond counters; the
//! benchmark harness checks that their sum stays within 5% of the owner's
//! measured wall time, which guards against uninstrumented code paths.

use std::time::Instant;

/// Where a slice of worker time went.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    /// Actual state access work: reads, modifies, writes, post-processing.
    Useful,
    /// Blocking on barriers or ordered-admission waits.
    Sync,
    /// Acquiring per-key locks once admission is granted (lock baseline only).
    Lock,
    /// Building auxiliary structures: transactions, the TPG, store slots.
    Construct,
    /// Searching for runnable operations and propagating readiness.
    Explore,
    /// Everything else: bookkeeping, result recording, queue management.
    Others,
}

/// Per-worker cumulative time split, in nanoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BreakdownRecord {
    pub useful_ns: u64,
    pub sync_ns: u64,
    pub lock_ns: u64,
    pub construct_ns: u64,
    pub explore_ns: u64,
    pub others_ns: u64,
}

impl BreakdownRecord {
    pub fn add(&mut self, cat: Category, ns: u64) {
        match cat {
            Category::Useful => self.useful_ns += ns,
            Category::Sync => self.sync_ns += ns,
            Category::Lock => self.lock_ns += ns,
            Category::Construct => self.construct_ns += ns,
            Category::Explore => self.explore_ns += ns,
            Category::Others => self.others_ns += ns,
        }
    }

    pub fn total_ns(&self) -> u64 {
        self.useful_ns
            + self.sync_ns
            + self.lock_ns
            + self.construct_ns
            + self.explore_ns
            + self.others_ns
    }

    pub fn merge(&mut self, other: &BreakdownRecord) {
        self.useful_ns += other.useful_ns;
        self.sync_ns += other.sync_ns;
        self.lock_ns += other.lock_ns;
        self.construct_ns += other.construct_ns;
        self.explore_ns += other.explore_ns;
        self.others_ns += other.others_ns;
    }
}

/// A breakdown plus the wall-clock span it is accounting for.
#[derive(Debug, Clone, Copy, Default)]
pub struct WorkerClock {
    pub breakdown: BreakdownRecord,
    pub wall_ns: u64,
}

impl WorkerClock {
    /// Fraction of wall time covered by the six categories. 1.0 is perfect.
    pub fn coverage(&self) -> f64 {
        if self.wall_ns == 0 {
            return 1.0;
        }
        self.breakdown.total_ns() as f64 / self.wall_ns as f64
    }
}

/// Tags consecutive slices of one thread's time. Every instant between
/// `new()` and `finish()` belongs to exactly one category: `switch_to`
/// closes the current slice and opens the next one.
pub struct SpanClock {
    started: Instant,
    slice_start: Instant,
    current: Category,
    record: BreakdownRecord,
}

impl SpanClock {
    pub fn new(initial: Category) -> Self {
        let now = Instant::now();
        SpanClock { started: now, slice_start: now, current: initial, record: BreakdownRecord::default() }
    }

    pub fn switch_to(&mut self, next: Category) {
        if next == self.current {
            return;
        }
        let now = Instant::now();
        let ns = now.duration_since(self.slice_start).as_nanos() as u64;
        self.record.add(self.current, ns);
        self.slice_start = now;
        self.current = next;
    }

    pub fn finish(mut self) -> WorkerClock {
        let now = Instant::now();
        let ns = now.duration_since(self.slice_start).as_nanos() as u64;
        self.record.add(self.current, ns);
        WorkerClock {
            breakdown: self.record,
            wall_ns: now.duration_since(self.started).as_nanos() as u64,
        }
    }
}

/// Latency quantiles over a set of per-packet samples.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LatencyQuantiles {
    pub p50_ns: u64,
    pub p90_ns: u64,
    pub p99_ns: u64,
    pub max_ns: u64,
    pub count: usize,
}

impl LatencyQuantiles {
    pub fn from_samples(samples: &mut [u64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_unstable();
        let n = samples.len();
        let q = |p: f64| samples[((n as f64 * p) as usize).min(n - 1)];
        LatencyQuantiles {
            p50_ns: q(0.50),
            p90_ns: q(0.90),
            p99_ns: q(0.99),
            max_ns: samples[n - 1],
            count: n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_clock_covers_wall_time() {
        let mut clock = SpanClock::new(Category::Construct);
        std::thread::sleep(std::time::Duration::from_millis(2));
        clock.switch_to(Category::Useful);
        std::thread::sleep(std::time::Duration::from_millis(2));
        clock.switch_to(Category::Explore);
        let wc = clock.finish();
        assert!(wc.coverage() > 0.95 && wc.coverage() < 1.05, "coverage {}", wc.coverage());
        assert!(wc.breakdown.construct_ns > 0);
        assert!(wc.breakdown.useful_ns > 0);
    }

    #[test]
    fn quantiles_pick_sorted_positions() {
        let mut xs: Vec<u64> = (1..=100).collect();
        let q = LatencyQuantiles::from_samples(&mut xs);
        assert_eq!(q.p50_ns, 51);
        assert_eq!(q.p99_ns, 100);
        assert_eq!(q.max_ns, 100);
        assert_eq!(q.count, 100);
    }
}
