//! Event stream processing: process filtering, entry/exit pairing into
//! interval metrics, startup time and per-class summaries.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::model::{
    merge_metric_maps, EventClass, EventKind, IntervalMetric, MetricMap, RuntimeProfile, Space,
    TraceEvent, COMM_LEN,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error("no entry of the initialization symbol {0:?}")]
    MissingInit(String),
    #[error("no entry of the module-loading symbol {0:?} in the initializing process")]
    MissingLoad(String),
    #[error("module load observed {0} ns before initialization")]
    NegativeInterval(u64),
}

/// Which process a stream should be narrowed to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProcessSelector {
    Comm(String),
    Pid(u32),
}

impl ProcessSelector {
    /// A numeric selector is a pid, anything else a command name.
    pub fn parse(s: &str) -> Self {
        match s.parse::<u32>() {
            Ok(pid) => ProcessSelector::Pid(pid),
            Err(_) => ProcessSelector::Comm(s.to_string()),
        }
    }

    pub fn matches(&self, event: &TraceEvent) -> bool {
        match self {
            ProcessSelector::Comm(name) => comm_prefix(&event.comm) == comm_prefix(name),
            ProcessSelector::Pid(pid) => event.pid == *pid,
        }
    }
}

/// The part of a command name the kernel keeps.
pub fn comm_prefix(comm: &str) -> &[u8] {
    let bytes = comm.as_bytes();
    &bytes[..bytes.len().min(COMM_LEN)]
}

pub fn filter_process(stream: Vec<TraceEvent>, selector: &ProcessSelector) -> Vec<TraceEvent> {
    stream.into_iter().filter(|e| selector.matches(e)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairingDiagnostics {
    pub events: u64,
    pub matched_pairs: u64,
    pub orphan_exits: u64,
    pub unmatched_entries: u64,
    /// Matched pairs whose exit precedes their entry; dropped.
    pub clock_violations: u64,
}

impl PairingDiagnostics {
    fn absorb(&mut self, other: &PairingDiagnostics) {
        self.events += other.events;
        self.matched_pairs += other.matched_pairs;
        self.orphan_exits += other.orphan_exits;
        self.unmatched_entries += other.unmatched_entries;
        self.clock_violations += other.clock_violations;
    }

    /// Every consumed event is accounted for exactly once.
    pub fn is_conserved(&self) -> bool {
        self.matched_pairs * 2
            + self.orphan_exits
            + self.unmatched_entries
            + self.clock_violations * 2
            == self.events
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Pairing {
    pub metrics: MetricMap,
    pub diagnostics: PairingDiagnostics,
}

impl Pairing {
    fn merge(mut self, other: Pairing) -> Pairing {
        merge_metric_maps(&mut self.metrics, &other.metrics);
        self.diagnostics.absorb(&other.diagnostics);
        self
    }
}

/// Pairs one thread's events, already in timestamp order.
fn pair_thread(events: &[&TraceEvent]) -> Pairing {
    let mut stacks: HashMap<&str, Vec<u64>> = HashMap::new();
    let mut out = Pairing::default();
    for event in events {
        out.diagnostics.events += 1;
        let stack = stacks.entry(event.probe_id.as_str()).or_default();
        match event.kind {
            EventKind::Entry => stack.push(event.ts_ns),
            EventKind::Exit => {
                let Some(entered) = stack.pop() else {
                    out.diagnostics.orphan_exits += 1;
                    continue;
                };
                let Some(duration) = event.ts_ns.checked_sub(entered) else {
                    out.diagnostics.clock_violations += 1;
                    continue;
                };
                out.diagnostics.matched_pairs += 1;
                out.metrics
                    .entry(event.probe_id.clone())
                    .or_insert_with(|| IntervalMetric::empty(&event.probe_id, event.class, event.space))
                    .record(duration);
            }
        }
    }
    out.diagnostics.unmatched_entries = stacks.values().map(|s| s.len() as u64).sum();
    out
}

fn group_by_thread(stream: &[TraceEvent]) -> Vec<Vec<&TraceEvent>> {
    let mut threads: BTreeMap<u32, Vec<&TraceEvent>> = BTreeMap::new();
    for event in stream {
        threads.entry(event.tid).or_default().push(event);
    }
    let mut groups: Vec<Vec<&TraceEvent>> = threads.into_values().collect();
    for g in &mut groups {
        // stable: equal timestamps keep stream order
        g.sort_by_key(|e| e.ts_ns);
    }
    groups
}

/// Matches entries with exits per (tid, probe) using a LIFO stack and
/// aggregates the intervals per probe.
///
/// Threads are independent, so with the `parallel` feature each thread is
/// paired on the rayon pool and the partial results merged.
pub fn pair_intervals(stream: &[TraceEvent]) -> Pairing {
    let groups = group_by_thread(stream);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        groups
            .par_iter()
            .map(|g| pair_thread(g))
            .reduce(Pairing::default, Pairing::merge)
    }
    #[cfg(not(feature = "parallel"))]
    {
        pair_intervals_sequential_groups(&groups)
    }
}

#[cfg(not(feature = "parallel"))]
fn pair_intervals_sequential_groups(groups: &[Vec<&TraceEvent>]) -> Pairing {
    groups
        .iter()
        .map(|g| pair_thread(g))
        .fold(Pairing::default(), Pairing::merge)
}

/// Single-threaded pairing, regardless of enabled features.
pub fn pair_intervals_sequential(stream: &[TraceEvent]) -> Pairing {
    group_by_thread(stream)
        .iter()
        .map(|g| pair_thread(g))
        .fold(Pairing::default(), Pairing::merge)
}

/// Whether a probe id names the symbol a profile pattern refers to.
pub fn probe_matches(probe_id: &str, pattern: &str) -> bool {
    crate::registry::name_matches(probe_id, pattern)
}

/// Time from the first entry of the init symbol to the first entry of the
/// load symbol in the same process.
pub fn compute_startup(stream: &[TraceEvent], profile: &RuntimeProfile) -> Result<u64, PipelineError> {
    let first_entry = |pattern: &str, pid: Option<u32>| {
        stream
            .iter()
            .filter(|e| e.kind == EventKind::Entry)
            .filter(|e| pid.is_none_or(|p| e.pid == p))
            .filter(|e| probe_matches(&e.probe_id, pattern))
            .min_by_key(|e| e.ts_ns)
    };
    let init = first_entry(&profile.init_symbol, None)
        .ok_or_else(|| PipelineError::MissingInit(profile.init_symbol.clone()))?;
    let load = first_entry(&profile.load_symbol, Some(init.pid))
        .ok_or_else(|| PipelineError::MissingLoad(profile.load_symbol.clone()))?;
    load.ts_ns
        .checked_sub(init.ts_ns)
        .ok_or_else(|| PipelineError::NegativeInterval(init.ts_ns - load.ts_ns))
}

/// WASI (user-space) and syscall (kernel) totals of one class.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClassSummary {
    pub wasi_total_ns: u64,
    pub wasi_count: u64,
    pub syscall_total_ns: u64,
    pub syscall_count: u64,
}

impl ClassSummary {
    pub fn wasi_average_ns(&self) -> f64 {
        ratio_or_zero(self.wasi_total_ns, self.wasi_count)
    }

    pub fn syscall_average_ns(&self) -> f64 {
        ratio_or_zero(self.syscall_total_ns, self.syscall_count)
    }
}

fn ratio_or_zero(total: u64, count: u64) -> f64 {
    if count == 0 {
        0.0
    } else {
        total as f64 / count as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub total_ns: u64,
    pub classes: BTreeMap<EventClass, ClassSummary>,
}

/// Per-class totals for every class, zeros where nothing was observed.
pub fn summarize(metrics: &MetricMap, total_ns: u64) -> Summary {
    let mut classes: BTreeMap<EventClass, ClassSummary> =
        EventClass::ALL.into_iter().map(|c| (c, ClassSummary::default())).collect();
    for m in metrics.values() {
        let entry = classes.entry(m.class).or_default();
        match m.space {
            Space::User => {
                entry.wasi_total_ns += m.total_ns;
                entry.wasi_count += m.count;
            }
            Space::Kernel => {
                entry.syscall_total_ns += m.total_ns;
                entry.syscall_count += m.count;
            }
        }
    }
    Summary { total_ns, classes }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::registry::builtin_profile;

    pub(crate) fn ev(kind: EventKind, probe: &str, tid: u32, ts: u64) -> TraceEvent {
        TraceEvent {
            ts_ns: ts,
            pid: 1,
            tid,
            comm: "wasmtime".into(),
            probe_id: probe.into(),
            class: EventClass::Read,
            kind,
            space: Space::User,
            size_bytes: None,
        }
    }

    use EventKind::{Entry, Exit};

    #[test]
    fn single_pair() {
        let p = pair_intervals(&[ev(Entry, "P", 7, 100), ev(Exit, "P", 7, 250)]);
        let m = &p.metrics["P"];
        assert_eq!((m.count, m.total_ns, m.min_ns, m.max_ns), (1, 150, 150, 150));
    }

    #[test]
    fn nested_same_probe_pairs_lifo() {
        let stream = [
            ev(Entry, "P", 1, 10),
            ev(Entry, "P", 1, 20),
            ev(Exit, "P", 1, 30),
            ev(Exit, "P", 1, 50),
        ];
        let m = &pair_intervals(&stream).metrics["P"];
        // (30 - 20) + (50 - 10)
        assert_eq!((m.count, m.total_ns, m.min_ns, m.max_ns), (2, 50, 10, 40));
    }

    #[test]
    fn orphans_and_residue_are_counted() {
        let stream = [
            ev(Exit, "P", 1, 5),
            ev(Entry, "P", 1, 10),
            ev(Exit, "P", 1, 20),
            ev(Entry, "Q", 2, 30),
        ];
        let p = pair_intervals(&stream);
        assert_eq!(p.diagnostics.orphan_exits, 1);
        assert_eq!(p.diagnostics.unmatched_entries, 1);
        assert_eq!(p.diagnostics.matched_pairs, 1);
        assert!(p.diagnostics.is_conserved());
    }

    #[test]
    fn out_of_order_delivery_is_sorted_per_thread() {
        let stream = [ev(Exit, "P", 3, 250), ev(Entry, "P", 3, 100)];
        let p = pair_intervals(&stream);
        assert_eq!(p.metrics["P"].total_ns, 150);
        assert_eq!(p.diagnostics.orphan_exits, 0);
    }

    #[test]
    fn filter_by_comm_and_pid() {
        let mut bash = ev(Entry, "P", 1, 1);
        bash.comm = "bash".into();
        bash.pid = 9;
        let stream = vec![ev(Entry, "P", 1, 2), bash];
        let kept = filter_process(stream.clone(), &ProcessSelector::Comm("wasmtime".into()));
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].comm, "wasmtime");
        assert!(filter_process(stream, &ProcessSelector::Pid(4242)).is_empty());
    }

    #[test]
    fn long_comm_matches_on_kernel_prefix() {
        let long = "wasmtime-serve-long";
        assert_eq!(long.len(), 19);
        let mut e = ev(Entry, "P", 1, 1);
        // the kernel reports at most 15 bytes
        e.comm = long[..15].to_string();
        let kept = filter_process(vec![e], &ProcessSelector::Comm(long.into()));
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn selector_parse() {
        assert_eq!(ProcessSelector::parse("42"), ProcessSelector::Pid(42));
        assert_eq!(ProcessSelector::parse("wasm3"), ProcessSelector::Comm("wasm3".into()));
    }

    fn startup_event(probe: &str, ts: u64, class: EventClass) -> TraceEvent {
        let mut e = ev(Entry, probe, 1, ts);
        e.class = class;
        e
    }

    #[test]
    fn startup_is_init_to_load_entry() {
        let p = builtin_profile("wasm3").unwrap();
        let stream = [
            startup_event("m3_NewEnvironment", 1000, EventClass::Init),
            startup_event("repl_load", 5000, EventClass::Load),
            startup_event("repl_load", 9000, EventClass::Load),
        ];
        assert_eq!(compute_startup(&stream, &p), Ok(4000));
        let same = [
            startup_event("m3_NewEnvironment", 7, EventClass::Init),
            startup_event("repl_load", 7, EventClass::Load),
        ];
        assert_eq!(compute_startup(&same, &p), Ok(0));
    }

    #[test]
    fn startup_errors() {
        let p = builtin_profile("wasm3").unwrap();
        let no_load = [startup_event("m3_NewEnvironment", 1000, EventClass::Init)];
        assert!(matches!(compute_startup(&no_load, &p), Err(PipelineError::MissingLoad(_))));
        assert!(matches!(compute_startup(&[], &p), Err(PipelineError::MissingInit(_))));
        let reversed = [
            startup_event("repl_load", 100, EventClass::Load),
            startup_event("m3_NewEnvironment", 300, EventClass::Init),
        ];
        assert_eq!(compute_startup(&reversed, &p), Err(PipelineError::NegativeInterval(200)));
        let mut other_pid = startup_event("repl_load", 5000, EventClass::Load);
        other_pid.pid = 2;
        let split = [startup_event("m3_NewEnvironment", 1000, EventClass::Init), other_pid];
        assert!(matches!(compute_startup(&split, &p), Err(PipelineError::MissingLoad(_))));
    }

    fn metric(probe: &str, class: EventClass, space: Space, count: u64, total: u64) -> IntervalMetric {
        IntervalMetric {
            probe_id: probe.into(),
            class,
            space,
            count,
            total_ns: total,
            min_ns: 0,
            max_ns: total,
        }
    }

    #[test]
    fn summarize_derives_averages() {
        let mut metrics = MetricMap::new();
        let wasi = metric("fd_read", EventClass::Read, Space::User, 26_214_401, 211_000_000_000);
        metrics.insert(wasi.probe_id.clone(), wasi);
        let s = summarize(&metrics, 300_000_000_000);
        let read = s.classes[&EventClass::Read];
        assert_eq!(read.wasi_count, 26_214_401);
        // 211 s / 26,214,401 calls
        assert!((read.wasi_average_ns() - 8049.0).abs() < 0.5);
        assert_eq!(read.syscall_average_ns(), 0.0);
    }

    #[test]
    fn summarize_empty_is_all_zero() {
        let s = summarize(&MetricMap::new(), 1);
        assert_eq!(s.classes.len(), 7);
        assert!(s.classes.values().all(|c| *c == ClassSummary::default()));
    }

    #[test]
    fn summarize_keeps_equal_write_counts() {
        let mut metrics = MetricMap::new();
        for (p, space) in [("fd_write", Space::User), ("__x64_sys_writev", Space::Kernel)] {
            metrics.insert(p.into(), metric(p, EventClass::Write, space, 101_797_388, 1));
        }
        let w = summarize(&metrics, 1).classes[&EventClass::Write];
        assert_eq!(w.wasi_count, w.syscall_count);
        assert_eq!(w.syscall_count, 101_797_388);
    }
}
