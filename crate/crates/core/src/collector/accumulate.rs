//! User-space model of in-kernel accumulation.
//!
//! Mirrors the probe programs' map semantics exactly: a bounded LIFO of
//! entry timestamps per (tid, probe), one accumulator per probe, and
//! counters for refused entries and unmatched exits. Used for the
//! accumulation collection mode and to check it against per-event pairing.

use std::collections::{BTreeMap, HashMap};

use crate::model::{EventKind, IntervalMetric, MetricMap, TraceEvent};

use super::wire::{AccumulatorRecord, EntryKey, EntryStack, MAX_DEPTH};
use super::ProbeSpec;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AccumulatorStats {
    pub matched: u64,
    /// Entries refused at full depth plus the exits that closed them.
    pub dropped: u64,
    pub orphans: u64,
    /// Exits timestamped before their entry; not accumulated.
    pub clock_violations: u64,
}

#[derive(Debug, Default)]
pub struct DepthAccumulator {
    stacks: HashMap<(u32, u32), EntryStack>,
    records: BTreeMap<u32, AccumulatorRecord>,
    stats: AccumulatorStats,
}

impl DepthAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on_entry(&mut self, key: EntryKey, ts_ns: u64) {
        let s = self.stacks.entry((key.tid, key.probe_index)).or_default();
        if s.depth as usize == MAX_DEPTH {
            s.overflow += 1;
            self.stats.dropped += 1;
            return;
        }
        s.ts_ns[s.depth as usize] = ts_ns;
        s.depth += 1;
    }

    pub fn on_exit(&mut self, key: EntryKey, ts_ns: u64) {
        let Some(s) = self.stacks.get_mut(&(key.tid, key.probe_index)) else {
            self.stats.orphans += 1;
            return;
        };
        if s.overflow > 0 {
            s.overflow -= 1;
            self.stats.dropped += 1;
            return;
        }
        if s.depth == 0 {
            self.stats.orphans += 1;
            return;
        }
        s.depth -= 1;
        let entered = s.ts_ns[s.depth as usize];
        match ts_ns.checked_sub(entered) {
            Some(delta) => {
                self.stats.matched += 1;
                self.records.entry(key.probe_index).or_default().record(delta);
            }
            None => self.stats.clock_violations += 1,
        }
    }

    /// Entries still open, including refused ones.
    pub fn unmatched_entries(&self) -> u64 {
        self.stacks.values().map(|s| u64::from(s.depth) + u64::from(s.overflow)).sum()
    }

    pub fn stats(&self) -> AccumulatorStats {
        self.stats
    }

    pub fn records(&self) -> &BTreeMap<u32, AccumulatorRecord> {
        &self.records
    }

    pub fn metrics(&self, probes: &[ProbeSpec]) -> MetricMap {
        let mut out = MetricMap::new();
        for (idx, r) in &self.records {
            let Some(p) = probes.iter().find(|p| p.index == *idx) else { continue };
            let mut m = IntervalMetric::empty(&p.probe_id, p.class, p.space);
            m.count = r.count;
            m.total_ns = r.total_ns;
            m.min_ns = r.min_ns;
            m.max_ns = r.max_ns;
            out.insert(p.probe_id.clone(), m);
        }
        out
    }
}

/// Runs a recorded stream through the accumulator, assigning probe indices
/// in order of first appearance.
pub fn accumulate_stream(stream: &[TraceEvent]) -> (MetricMap, AccumulatorStats, u64) {
    let mut probes: Vec<ProbeSpec> = Vec::new();
    let mut index_of: HashMap<&str, u32> = HashMap::new();
    let mut order: Vec<&TraceEvent> = stream.iter().collect();
    order.sort_by_key(|e| e.ts_ns);
    let mut acc = DepthAccumulator::new();
    for e in order {
        let idx = *index_of.entry(e.probe_id.as_str()).or_insert_with(|| {
            let i = probes.len() as u32;
            probes.push(ProbeSpec::synthetic(i, &e.probe_id, e.class, e.space));
            i
        });
        let key = EntryKey {
            tid: e.tid,
            probe_index: idx,
        };
        match e.kind {
            EventKind::Entry => acc.on_entry(key, e.ts_ns),
            EventKind::Exit => acc.on_exit(key, e.ts_ns),
        }
    }
    (acc.metrics(&probes), acc.stats(), acc.unmatched_entries())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EventClass, Space};
    use crate::pipeline::pair_intervals;
    use proptest::prelude::*;

    const K: EntryKey = EntryKey {
        tid: 1,
        probe_index: 0,
    };

    #[test]
    fn single_pair() {
        let mut a = DepthAccumulator::new();
        a.on_entry(K, 100);
        a.on_exit(K, 130);
        let r = a.records()[&0];
        assert_eq!((r.count, r.total_ns, r.min_ns, r.max_ns), (1, 30, 30, 30));
    }

    #[test]
    fn orphan_exit_is_counted_not_accumulated() {
        let mut a = DepthAccumulator::new();
        a.on_exit(K, 10);
        assert_eq!(a.stats().orphans, 1);
        assert!(a.records().is_empty());
    }

    #[test]
    fn seventeenth_entry_is_dropped() {
        let mut a = DepthAccumulator::new();
        for i in 0..17 {
            a.on_entry(K, 100 + i);
        }
        assert_eq!(a.stats().dropped, 1);
        for i in 0..17 {
            a.on_exit(K, 1000 + i);
        }
        // the refused entry's exit is discarded, the other 16 pair LIFO
        assert_eq!(a.stats().dropped, 2);
        assert_eq!(a.stats().matched, 16);
        assert_eq!(a.unmatched_entries(), 0);
    }

    fn ev(kind: EventKind, tid: u32, probe: &str, ts: u64) -> TraceEvent {
        TraceEvent {
            ts_ns: ts,
            pid: 1,
            tid,
            comm: "x".into(),
            probe_id: probe.into(),
            class: EventClass::Read,
            kind,
            space: Space::User,
            size_bytes: None,
        }
    }

    #[test]
    fn thousand_pairs_match_user_space_pairing() {
        let mut stream = Vec::new();
        for i in 0..1000u64 {
            stream.push(ev(EventKind::Entry, (i % 3) as u32, "p", 10 * i + 1));
            stream.push(ev(EventKind::Exit, (i % 3) as u32, "p", 10 * i + 1 + (i % 7) + 1));
        }
        let (m, stats, open) = accumulate_stream(&stream);
        assert_eq!(stats.matched, 1000);
        assert_eq!(open, 0);
        assert_eq!(m, pair_intervals(&stream).metrics);
    }

    // Well-nested streams shallower than the depth cap.
    fn nested() -> impl Strategy<Value = Vec<TraceEvent>> {
        proptest::collection::vec((0u32..4, 0usize..3, 1u64..50, 0usize..4), 1..200).prop_map(|ops| {
            let probes = ["a", "b", "c"];
            let mut ts = 1u64;
            let mut out = Vec::new();
            for (tid, p, gap, depth) in ops {
                let mut opened = Vec::new();
                for _ in 0..=depth {
                    ts += gap;
                    out.push(ev(EventKind::Entry, tid, probes[p], ts));
                    opened.push(ts);
                }
                for _ in opened {
                    ts += gap;
                    out.push(ev(EventKind::Exit, tid, probes[p], ts));
                }
            }
            out
        })
    }

    proptest! {
        #[test]
        fn cross_mode_equivalence(stream in nested()) {
            let (m, stats, _) = accumulate_stream(&stream);
            prop_assert_eq!(stats.dropped, 0);
            prop_assert_eq!(m, pair_intervals(&stream).metrics);
        }
    }
}
