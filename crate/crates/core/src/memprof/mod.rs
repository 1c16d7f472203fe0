//! Live/peak byte accounting for tensor storage.
//!
//! Every tensor data or gradient buffer reports its size here when it is
//! allocated and again when it is dropped. Counts always go to the
//! process-wide tracker, and additionally to the tracker installed on the
//! allocating thread (see [`MemTracker::enter`]), which is how a single
//! workload is measured in isolation while other threads keep running.
//!
//! The peak is the exact high-water mark: it is updated synchronously on
//! every allocation, so there is no sampling jitter.

mod experiments;

pub use experiments::{
    linear_fit, memory_sweep, noise_image, parse_report, predicted_forward_bytes, predicted_peak_bytes,
    tiled_peak, tiled_peak_for, tracked_run, write_report, LinearFit, MemReport, ProfileReport, ReportRow,
    RowStatus, SweepConfig, SweepReport, SweepRow, TiledConfig, Workload, DEFAULT_CAP_BYTES, REPORT_HEADER,
};

use std::cell::RefCell;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

/// Byte counters for one measurement scope.
#[derive(Debug, Default)]
pub struct MemTracker {
    live: AtomicUsize,
    peak: AtomicUsize,
    phase_peak: AtomicUsize,
    allocs: AtomicU64,
    frees: AtomicU64,
    cap: Option<usize>,
    cap_exceeded: AtomicBool,
    record_phases: bool,
    phases: Mutex<Vec<(String, usize)>>,
}

static GLOBAL: MemTracker = MemTracker {
    live: AtomicUsize::new(0),
    peak: AtomicUsize::new(0),
    phase_peak: AtomicUsize::new(0),
    allocs: AtomicU64::new(0),
    frees: AtomicU64::new(0),
    cap: None,
    cap_exceeded: AtomicBool::new(false),
    record_phases: false,
    phases: Mutex::new(Vec::new()),
};

thread_local! {
    static CURRENT: RefCell<Option<Arc<MemTracker>>> = const { RefCell::new(None) };
}

/// The process-wide tracker. Sees every tensor allocation from every thread.
pub fn global() -> &'static MemTracker {
    &GLOBAL
}

/// The tracker installed on this thread, if any.
pub fn current() -> Option<Arc<MemTracker>> {
    CURRENT.with(|c| c.borrow().clone())
}

/// Close the current phase on this thread's tracker under `label`.
///
/// No-op unless the installed tracker was created with phase recording.
pub fn phase(label: &str) {
    CURRENT.with(|c| {
        if let Some(t) = c.borrow().as_ref() {
            t.mark(label);
        }
    });
}

/// Restores the previously installed tracker when dropped.
pub struct ScopeGuard {
    previous: Option<Arc<MemTracker>>,
}

impl Drop for ScopeGuard {
    fn drop(&mut self) {
        let prev = self.previous.take();
        CURRENT.with(|c| *c.borrow_mut() = prev);
    }
}

impl MemTracker {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// A tracker that records per-phase high-water marks via [`phase`].
    pub fn with_phases() -> Arc<Self> {
        Arc::new(Self {
            record_phases: true,
            ..Self::default()
        })
    }

    /// A tracker that flags (but does not fail) allocations pushing live
    /// bytes above `cap`.
    pub fn with_cap(cap: usize) -> Arc<Self> {
        Arc::new(Self {
            cap: Some(cap),
            ..Self::default()
        })
    }

    /// Install this tracker on the calling thread until the guard drops.
    pub fn enter(self: &Arc<Self>) -> ScopeGuard {
        let previous = CURRENT.with(|c| c.borrow_mut().replace(Arc::clone(self)));
        ScopeGuard { previous }
    }

    pub fn live_bytes(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn alloc_count(&self) -> u64 {
        self.allocs.load(Ordering::SeqCst)
    }

    pub fn free_count(&self) -> u64 {
        self.frees.load(Ordering::SeqCst)
    }

    pub fn cap_exceeded(&self) -> bool {
        self.cap_exceeded.load(Ordering::SeqCst)
    }

    /// Every allocation seen by this tracker has been released.
    pub fn is_balanced(&self) -> bool {
        self.live_bytes() == 0 && self.alloc_count() == self.free_count()
    }

    /// Reset the peak to the current live value.
    pub fn reset_peak(&self) {
        let live = self.live_bytes();
        self.peak.store(live, Ordering::SeqCst);
        self.phase_peak.store(live, Ordering::SeqCst);
    }

    pub fn phases(&self) -> Vec<(String, usize)> {
        self.phases.lock().expect("phase log poisoned").clone()
    }

    fn mark(&self, label: &str) {
        if !self.record_phases {
            return;
        }
        let high = self.phase_peak.swap(self.live_bytes(), Ordering::SeqCst);
        self.phases
            .lock()
            .expect("phase log poisoned")
            .push((label.to_string(), high));
    }

    fn add(&self, bytes: usize) {
        let now = self.live.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.allocs.fetch_add(1, Ordering::SeqCst);
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.phase_peak.fetch_max(now, Ordering::SeqCst);
        if let Some(cap) = self.cap {
            if now > cap {
                self.cap_exceeded.store(true, Ordering::SeqCst);
            }
        }
    }

    fn sub(&self, bytes: usize) {
        let prev = self.live.fetch_sub(bytes, Ordering::SeqCst);
        // a release without a matching registration means some buffer
        // bypassed the allocation hook
        assert!(
            prev >= bytes,
            "memory tracker underflow: releasing {bytes} bytes with only {prev} live"
        );
        self.frees.fetch_add(1, Ordering::SeqCst);
    }
}

/// Register a fresh allocation. Returns the scoped tracker it was charged to.
pub(crate) fn register_alloc(bytes: usize) -> Option<Arc<MemTracker>> {
    GLOBAL.add(bytes);
    let scoped = current();
    if let Some(t) = &scoped {
        t.add(bytes);
    }
    scoped
}

pub(crate) fn register_free(bytes: usize, scoped: Option<&Arc<MemTracker>>) {
    GLOBAL.sub(bytes);
    if let Some(t) = scoped {
        t.sub(bytes);
    }
}
