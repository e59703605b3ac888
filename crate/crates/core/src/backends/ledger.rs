use core::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PortKind {
    Extractor,
    Summarizer,
    Embedder,
    Planner,
    Chooser,
}

impl PortKind {
    pub const ALL: [PortKind; 5] = [
        PortKind::Extractor,
        PortKind::Summarizer,
        PortKind::Embedder,
        PortKind::Planner,
        PortKind::Chooser,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Default)]
struct Slot {
    calls: AtomicU64,
    input_units: AtomicU64,
    output_units: AtomicU64,
    failures: AtomicU64,
    repairs: AtomicU64,
    input_tokens: AtomicU64,
    output_tokens: AtomicU64,
}

/// Per-port call counters. Safe to share across worker threads.
///
/// Units are bytes of text in and out; token counts are filled in only by
/// backends whose endpoint reports usage.
#[derive(Default)]
pub struct PortCallLedger {
    slots: [Slot; 5],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortCounters {
    pub calls: u64,
    pub input_units: u64,
    pub output_units: u64,
    pub failures: u64,
    pub repairs: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub extractor: PortCounters,
    pub summarizer: PortCounters,
    pub embedder: PortCounters,
    pub planner: PortCounters,
    pub chooser: PortCounters,
}

impl LedgerSnapshot {
    pub fn get(&self, kind: PortKind) -> &PortCounters {
        match kind {
            PortKind::Extractor => &self.extractor,
            PortKind::Summarizer => &self.summarizer,
            PortKind::Embedder => &self.embedder,
            PortKind::Planner => &self.planner,
            PortKind::Chooser => &self.chooser,
        }
    }

    fn get_mut(&mut self, kind: PortKind) -> &mut PortCounters {
        match kind {
            PortKind::Extractor => &mut self.extractor,
            PortKind::Summarizer => &mut self.summarizer,
            PortKind::Embedder => &mut self.embedder,
            PortKind::Planner => &mut self.planner,
            PortKind::Chooser => &mut self.chooser,
        }
    }

    /// Counter-wise difference `self - earlier`.
    pub fn since(&self, earlier: &LedgerSnapshot) -> LedgerSnapshot {
        let mut out = LedgerSnapshot::default();
        for kind in PortKind::ALL {
            let (a, b) = (self.get(kind), earlier.get(kind));
            *out.get_mut(kind) = PortCounters {
                calls: a.calls - b.calls,
                input_units: a.input_units - b.input_units,
                output_units: a.output_units - b.output_units,
                failures: a.failures - b.failures,
                repairs: a.repairs - b.repairs,
                input_tokens: a.input_tokens - b.input_tokens,
                output_tokens: a.output_tokens - b.output_tokens,
            };
        }
        out
    }
}

impl PortCallLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, kind: PortKind, input_units: usize, output_units: usize, failed: bool) {
        let s = &self.slots[kind.slot()];
        s.calls.fetch_add(1, Ordering::Relaxed);
        s.input_units.fetch_add(input_units as u64, Ordering::Relaxed);
        s.output_units.fetch_add(output_units as u64, Ordering::Relaxed);
        if failed {
            s.failures.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn record_repair(&self, kind: PortKind) {
        self.slots[kind.slot()].repairs.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_tokens(&self, kind: PortKind, input: u64, output: u64) {
        let s = &self.slots[kind.slot()];
        s.input_tokens.fetch_add(input, Ordering::Relaxed);
        s.output_tokens.fetch_add(output, Ordering::Relaxed);
    }

    pub fn calls(&self, kind: PortKind) -> u64 {
        self.slots[kind.slot()].calls.load(Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let mut out = LedgerSnapshot::default();
        for kind in PortKind::ALL {
            let s = &self.slots[kind.slot()];
            *out.get_mut(kind) = PortCounters {
                calls: s.calls.load(Ordering::Relaxed),
                input_units: s.input_units.load(Ordering::Relaxed),
                output_units: s.output_units.load(Ordering::Relaxed),
                failures: s.failures.load(Ordering::Relaxed),
                repairs: s.repairs.load(Ordering::Relaxed),
                input_tokens: s.input_tokens.load(Ordering::Relaxed),
                output_tokens: s.output_tokens.load(Ordering::Relaxed),
            };
        }
        out
    }

    /// Zeroes every counter. Only meant for use between measurement phases.
    pub fn reset(&mut self) {
        self.slots = Default::default();
    }
}

impl core::fmt::Debug for PortCallLedger {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        self.snapshot().fmt(f)
    }
}
