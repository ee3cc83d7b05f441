//! Per-thread instrumentation for the dense kernels.
//!
//! Every [`Matrix`](super::Matrix) registers its element count while alive,
//! and every counted kernel charges a fixed FLOP cost. Scopes read the
//! counters relative to the moment they were opened. Counters are
//! thread-local, so measurements must be taken on the thread that runs the
//! kernels.

use std::cell::Cell;

/// Constant in the thin-SVD cost `c · d_max · d_min²`.
pub const SVD_FLOP_CONSTANT: u64 = 14;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static LARGEST: Cell<usize> = const { Cell::new(0) };
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn on_alloc(len: usize) {
    LIVE.with(|live| {
        let now = live.get() + len;
        live.set(now);
        PEAK.with(|p| p.set(p.get().max(now)));
    });
    LARGEST.with(|l| l.set(l.get().max(len)));
}

pub(crate) fn on_free(len: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(len)));
}

pub(crate) fn charge(flops: u64) {
    FLOPS.with(|f| f.set(f.get() + flops));
}

/// FLOPs of a dense `a×b · b×c` product.
pub fn matmul_flops(a: usize, b: usize, c: usize) -> u64 {
    2 * (a as u64) * (b as u64) * (c as u64)
}

/// FLOPs charged for a thin SVD of a `rows × cols` matrix.
pub fn svd_flops(rows: usize, cols: usize) -> u64 {
    let (hi, lo) = (rows.max(cols) as u64, rows.min(cols) as u64);
    SVD_FLOP_CONSTANT * hi * lo * lo
}

/// Counts FLOPs charged on this thread since the scope was opened.
pub struct FlopScope {
    start: u64,
}

impl FlopScope {
    pub fn new() -> Self {
        Self {
            start: FLOPS.with(Cell::get),
        }
    }

    pub fn flops(&self) -> u64 {
        FLOPS.with(Cell::get) - self.start
    }
}

impl Default for FlopScope {
    fn default() -> Self {
        Self::new()
    }
}

/// Tracks the matrix-element high-water mark above the live baseline at open.
/// Scopes nest: closing an inner scope folds its marks back into the outer one.
pub struct AllocScope {
    baseline: usize,
    outer_peak: usize,
    outer_largest: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocStats {
    /// Peak live matrix elements above the baseline.
    pub peak: usize,
    /// Element count of the largest single matrix created inside the scope.
    pub largest: usize,
}

impl AllocScope {
    pub fn new() -> Self {
        let baseline = LIVE.with(Cell::get);
        let outer_peak = PEAK.with(|p| p.replace(baseline));
        let outer_largest = LARGEST.with(|l| l.replace(0));
        Self {
            baseline,
            outer_peak,
            outer_largest,
        }
    }

    pub fn stats(&self) -> AllocStats {
        AllocStats {
            peak: PEAK.with(Cell::get).saturating_sub(self.baseline),
            largest: LARGEST.with(Cell::get),
        }
    }
}

impl Drop for AllocScope {
    fn drop(&mut self) {
        PEAK.with(|p| p.set(p.get().max(self.outer_peak)));
        LARGEST.with(|l| l.set(l.get().max(self.outer_largest)));
    }
}

impl Default for AllocScope {
    fn default() -> Self {
        Self::new()
    }
}
