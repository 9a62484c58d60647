//! Multiply-accumulate accounting.
//!
//! Kernels in [`crate::tensor`] report their MAC counts through [`record`].
//! Nothing is counted unless a ledger has been activated on the current
//! thread, so uninstrumented code pays one thread-local lookup per kernel.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

/// Which kind of layer a MAC belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MacKind {
    /// Products against frozen (or base) dense weights.
    FrozenLinear,
    /// Products against low-rank factors or a materialized offset.
    LowRank,
    /// Token-mixing products inside attention (scores, weighted values, softmax normalization).
    Attention,
}

impl MacKind {
    pub const ALL: [MacKind; 3] = [MacKind::FrozenLinear, MacKind::LowRank, MacKind::Attention];

    fn slot(self) -> usize {
        match self {
            MacKind::FrozenLinear => 0,
            MacKind::LowRank => 1,
            MacKind::Attention => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MacKind::FrozenLinear => "frozen_linear",
            MacKind::LowRank => "lowrank",
            MacKind::Attention => "attention",
        }
    }
}

/// Shared MAC counters, one per [`MacKind`].
#[derive(Debug)]
pub struct FlopLedger {
    counters: [AtomicU64; 3],
    enabled: AtomicBool,
}

impl Default for FlopLedger {
    fn default() -> Self {
        FlopLedger {
            counters: [AtomicU64::new(0), AtomicU64::new(0), AtomicU64::new(0)],
            enabled: AtomicBool::new(true),
        }
    }
}

impl FlopLedger {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn add(&self, kind: MacKind, macs: u64) {
        if self.enabled.load(Ordering::Relaxed) {
            self.counters[kind.slot()].fetch_add(macs, Ordering::Relaxed);
        }
    }

    pub fn set_enabled(&self, enabled: bool) {
        self.enabled.store(enabled, Ordering::Relaxed);
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled.load(Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> MacCounts {
        let get = |k: MacKind| self.counters[k.slot()].load(Ordering::Relaxed);
        MacCounts {
            frozen_linear: get(MacKind::FrozenLinear),
            lowrank: get(MacKind::LowRank),
            attention: get(MacKind::Attention),
        }
    }

    /// Zeroes every counter. Only call between measurement scopes.
    pub fn reset(&self) {
        for c in &self.counters {
            c.store(0, Ordering::Relaxed);
        }
    }

    /// Routes kernel MACs issued on this thread into `self` until the guard drops.
    pub fn activate(self: &Arc<Self>) -> ActiveLedger {
        let previous = ACTIVE.with(|a| a.replace(Some(Arc::clone(self))));
        ActiveLedger { previous }
    }
}

/// Snapshot of ledger counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounts {
    pub frozen_linear: u64,
    pub lowrank: u64,
    pub attention: u64,
}

impl MacCounts {
    pub fn total(&self) -> u64 {
        self.frozen_linear + self.lowrank + self.attention
    }

    pub fn linear(&self) -> u64 {
        self.frozen_linear + self.lowrank
    }

    pub fn get(&self, kind: MacKind) -> u64 {
        match kind {
            MacKind::FrozenLinear => self.frozen_linear,
            MacKind::LowRank => self.lowrank,
            MacKind::Attention => self.attention,
        }
    }

    /// FLOPs under the convention FLOPs = 2 x MACs.
    pub fn flops(&self) -> u64 {
        2 * self.total()
    }
}

impl fmt::Display for MacCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "frozen_linear={} lowrank={} attention={} total_macs={} flops={}",
            self.frozen_linear,
            self.lowrank,
            self.attention,
            self.total(),
            self.flops()
        )
    }
}

thread_local! {
    static ACTIVE: RefCell<Option<Arc<FlopLedger>>> = const { RefCell::new(None) };
    static KIND: Cell<MacKind> = const { Cell::new(MacKind::FrozenLinear) };
}

/// Guard returned by [`FlopLedger::activate`]; restores the previously active ledger.
pub struct ActiveLedger {
    previous: Option<Arc<FlopLedger>>,
}

impl Drop for ActiveLedger {
    fn drop(&mut self) {
        let prev = self.previous.take();
        ACTIVE.with(|a| *a.borrow_mut() = prev);
    }
}

/// Adds `macs` to the active ledger (if any) under the current [`MacKind`].
pub fn record(macs: u64) {
    let kind = KIND.with(Cell::get);
    record_as(kind, macs);
}

pub fn record_as(kind: MacKind, macs: u64) {
    ACTIVE.with(|a| {
        if let Some(ledger) = a.borrow().as_ref() {
            ledger.add(kind, macs);
        }
    });
}

/// Runs `f` with kernel MACs attributed to `kind`.
pub fn with_kind<R>(kind: MacKind, f: impl FnOnce() -> R) -> R {
    let previous = KIND.with(|k| k.replace(kind));
    let out = f();
    KIND.with(|k| k.set(previous));
    out
}

/// Runs `f` with the thread's ledger detached, so nothing it does is counted.
pub fn suspended<R>(f: impl FnOnce() -> R) -> R {
    let previous = ACTIVE.with(|a| a.borrow_mut().take());
    let _restore = ActiveLedger { previous };
    f()
}

/// Runs `f` under a fresh ledger and returns its result with the counts it produced.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, MacCounts) {
    let ledger = FlopLedger::new();
    let out = {
        let _guard = ledger.activate();
        f()
    };
    (out, ledger.snapshot())
}
