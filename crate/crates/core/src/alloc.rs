//! Allocation accounting for the peak-memory metric.
//!
//! [`TrackingAllocator`] wraps the system allocator and keeps a per-thread
//! byte counter with a high-water mark. A binary opts in with
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: circuitforge::alloc::TrackingAllocator = circuitforge::alloc::TrackingAllocator;
//! ```
//!
//! Counters are thread-local so concurrent work on other threads does not
//! leak into a measurement. Memory freed on a different thread than the one
//! that allocated it is attributed to the freeing thread.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

pub struct TrackingAllocator;

static INSTALLED: AtomicBool = AtomicBool::new(false);

thread_local! {
    static CURRENT: Cell<i64> = const { Cell::new(0) };
    static PEAK: Cell<i64> = const { Cell::new(0) };
}

#[inline]
fn record(delta: i64) {
    let _ = CURRENT.try_with(|c| {
        let now = c.get() + delta;
        c.set(now);
        let _ = PEAK.try_with(|p| {
            if now > p.get() {
                p.set(now);
            }
        });
    });
}

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            record(layout.size() as i64);
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            record(layout.size() as i64);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        record(-(layout.size() as i64));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            record(new_size as i64 - layout.size() as i64);
        }
        p
    }
}

/// Whether a [`TrackingAllocator`] is serving this process. Detected by
/// probing: an allocation moves the counter only when the tracker is live.
pub fn is_installed() -> bool {
    if INSTALLED.load(Ordering::Relaxed) {
        return true;
    }
    let before = current_bytes();
    let probe = std::hint::black_box(vec![0u8; 64]);
    let live = current_bytes() != before;
    drop(probe);
    if live {
        INSTALLED.store(true, Ordering::Relaxed);
    }
    live
}

/// Bytes currently attributed to this thread.
pub fn current_bytes() -> i64 {
    CURRENT.try_with(Cell::get).unwrap_or(0)
}

/// High-water mark of this thread's allocations from the moment the scope
/// was opened.
pub struct PeakScope {
    start: i64,
}

impl PeakScope {
    pub fn start() -> Self {
        let start = current_bytes();
        let _ = PEAK.try_with(|p| p.set(start));
        Self { start }
    }

    /// Peak bytes above the level at [`start`](Self::start). Zero when the
    /// tracking allocator is not installed.
    pub fn peak_bytes(&self) -> u64 {
        let peak = PEAK.try_with(Cell::get).unwrap_or(self.start);
        (peak - self.start).max(0) as u64
    }
}

/// Peak resident set size of the process (`VmHWM`), where the OS exposes it.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}
