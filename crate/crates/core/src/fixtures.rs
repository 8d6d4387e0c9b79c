//! Golden replay fixtures built from published per-runtime measurements.
//!
//! Large-file counts do not fit in a shipped log, so each table is scaled
//! down by a fixed divisor. Every interval in a synthesized log lasts the
//! measured average (total time / count), which keeps counts, averages and
//! cross-runtime ratios intact while totals shrink with the divisor.

use std::path::{Path, PathBuf};

use crate::model::{
    EventClass, EventKind, RuntimeProfile, Space, TraceEvent, WorkloadKind, WorkloadSpec,
    DEFAULT_LOOP_COUNT,
};
use crate::registry::builtin_profile;
use crate::report::{write_event_log, EventLog, ReportError};

pub const GIB: u64 = 1 << 30;
pub const MIB: u64 = 1 << 20;

/// A workload with the conventional artifact locations.
pub fn workload(kind: WorkloadKind, file_size_bytes: u64, chunk_bytes: u64) -> WorkloadSpec {
    WorkloadSpec {
        kind,
        file_size_bytes,
        chunk_bytes,
        loop_count: DEFAULT_LOOP_COUNT,
        source_path: PathBuf::from(format!("cases/{kind}.c")),
        wasm_module: PathBuf::from(format!("build/{kind}.wasm")),
        native_binary: PathBuf::from(format!("build/{kind}")),
    }
}

/// One runtime's WASI and syscall totals for a class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoldenRow {
    pub runtime: &'static str,
    pub wasi_s: f64,
    pub wasi_count: u64,
    pub syscall_s: f64,
    pub syscall_count: u64,
}

const fn row(runtime: &'static str, wasi_s: f64, wasi_count: u64, syscall_s: f64, syscall_count: u64) -> GoldenRow {
    GoldenRow {
        runtime,
        wasi_s,
        wasi_count,
        syscall_s,
        syscall_count,
    }
}

/// fread over a 100 GiB input, 4096-byte chunks.
pub const FREAD_100GIB: [GoldenRow; 6] = [
    row("native", 178.0, 26_214_401, 123.0, 26_214_401),
    row("wasm3", 211.0, 26_214_401, 180.0, 26_214_401),
    row("wamr", 249.0, 26_214_401, 226.0, 26_214_401),
    row("wasmtime_preview2", 311.0, 52_428_801, 144.0, 52_428_801),
    row("wasmer", 683.0, 26_214_401, 165.0, 52_428_801),
    row("wasmtime", 215.0, 26_214_401, 157.0, 26_214_401),
];

/// fwrite of a 99 GiB output in 61-byte records.
pub const FWRITE_99GIB: [GoldenRow; 6] = [
    row("native", 2701.0, 1_750_000_077, 51.0, 25_976_563),
    row("wasm3", 311.0, 101_797_388, 201.0, 101_797_388),
    row("wamr", 290.0, 101_797_388, 186.0, 101_797_388),
    row("wasmtime_preview2", 1026.0, 203_594_775, 370.0, 203_594_775),
    row("wasmer", 1775.0, 101_797_388, 370.0, 203_594_776),
    row("wasmtime", 419.0, 101_797_388, 198.0, 101_797_388),
];

pub const FREAD_SCALE: u64 = 10_000;
pub const FWRITE_SCALE: u64 = 100_000;

/// WASI seconds spent in 50 iterations of each auxiliary call.
pub const FSEEK_S: [(&str, f64); 6] = [
    ("native", 0.00033),
    ("wasm3", 0.00013),
    ("wasmtime", 0.00023),
    ("wasmtime_preview2", 0.00022),
    ("wasmer", 0.00017),
    ("wamr", 0.00015),
];

pub const FOPEN_S: [(&str, f64); 6] = [
    ("native", 20.86419),
    ("wasm3", 21.09183),
    ("wasmtime", 19.69448),
    ("wasmtime_preview2", 0.00036),
    ("wasmer", 21.45274),
    ("wamr", 21.10804),
];

pub const FCLOSE_S: [(&str, f64); 6] = [
    ("native", 35.00267),
    ("wasm3", 5.17304),
    ("wasmtime", 24.15975),
    ("wasmtime_preview2", 0.00016),
    ("wasmer", 0.00019),
    ("wamr", 5.87338),
];

/// Representative startup times; only their ordering and spread matter.
pub const STARTUP_NS: [(&str, u64); 5] = [
    ("wasm3", 1_000_000),
    ("wasmtime", 20_000_000),
    ("wasmtime_preview2", 22_000_000),
    ("wamr", 100_000_000),
    ("wasmer", 2_000_000_000),
];

/// Runtimes whose syscalls run on a separate worker thread.
const ASYNC_RUNTIMES: [&str; 2] = ["wasmer", "wasmtime_preview2"];

pub fn scaled(count: u64, divisor: u64) -> u64 {
    ((count as f64 / divisor as f64).round() as u64).max(1)
}

fn average_ns(total_s: f64, count: u64) -> u64 {
    ((total_s * 1e9 / count as f64).round() as u64).max(1)
}

/// A symbol name that a profile pattern would resolve to.
pub fn concrete_symbol(pattern: &str) -> String {
    if let Some((head, tail)) = pattern.split_once("...") {
        let middle = match head {
            "wasi_common" => "::snapshots::preview_1::wasi_snapshot_preview1::",
            "wasmtime_wasi::preview2" => "::preview1::wasi_snapshot_preview1::",
            "wasmer_wasix" => "::syscalls::wasi::",
            _ => "::",
        };
        return format!("{head}{middle}{tail}");
    }
    if pattern.starts_with("RunCommand::") {
        return format!("wasmtime_cli::commands::run::{pattern}");
    }
    if pattern == "m3_NewEnv" {
        return "m3_NewEnvironment".to_string();
    }
    pattern.to_string()
}

struct Synth {
    comm: String,
    pid: u32,
    events: Vec<TraceEvent>,
    cursor: u64,
    user_ns: u64,
}

impl Synth {
    fn new(profile: &RuntimeProfile, kind: WorkloadKind) -> Self {
        let comm = if profile.comm_filter.is_empty() {
            kind.as_str().to_string()
        } else {
            profile.comm_filter.clone()
        };
        Synth {
            comm,
            pid: 4242,
            events: Vec::new(),
            cursor: 1_000_000,
            user_ns: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, tid: u32, probe: &str, class: EventClass, kind: EventKind, space: Space, ts: u64, size: Option<u64>) {
        self.events.push(TraceEvent {
            ts_ns: ts,
            pid: self.pid,
            tid,
            comm: self.comm.clone(),
            probe_id: probe.to_string(),
            class,
            kind,
            space,
            size_bytes: size,
        });
    }

    fn interval(&mut self, tid: u32, probe: &str, class: EventClass, space: Space, dur: u64, size: Option<u64>) {
        let start = self.cursor;
        self.push(tid, probe, class, EventKind::Entry, space, start, None);
        self.push(tid, probe, class, EventKind::Exit, space, start + dur, size);
        self.cursor = start + dur + 100;
        if space == Space::User {
            self.user_ns += dur;
        }
    }

    /// `wasi_count` WASI intervals with `syscall_count` syscalls spread
    /// evenly after them.
    #[allow(clippy::too_many_arguments)]
    fn calls(
        &mut self,
        profile: &RuntimeProfile,
        class: EventClass,
        wasi_count: u64,
        wasi_dur: u64,
        syscall_count: u64,
        syscall_dur: u64,
        size: Option<u64>,
    ) {
        let wasi = concrete_symbol(&profile.wasi_hook(class).expect("hook per class").symbol_pattern);
        let sys = profile.syscall_hook(class).expect("hook per class").kernel_symbol.clone();
        let main_tid = self.pid;
        let sys_tid = if ASYNC_RUNTIMES.contains(&profile.name.as_str()) {
            self.pid + 1
        } else {
            main_tid
        };
        let mut emitted = 0;
        for i in 0..wasi_count {
            self.interval(main_tid, &wasi, class, Space::User, wasi_dur, size);
            let due = if i + 1 == wasi_count {
                syscall_count
            } else {
                (i + 1) * syscall_count / wasi_count
            };
            while emitted < due {
                self.interval(sys_tid, &sys, class, Space::Kernel, syscall_dur, size);
                emitted += 1;
            }
        }
    }

    fn startup(&mut self, profile: &RuntimeProfile) {
        let Some(&(_, ns)) = STARTUP_NS.iter().find(|(rt, _)| *rt == profile.name) else {
            return;
        };
        let start = self.cursor;
        let tid = self.pid;
        self.push(tid, &concrete_symbol(&profile.init_symbol), EventClass::Init, EventKind::Entry, Space::User, start, None);
        self.push(tid, &concrete_symbol(&profile.load_symbol), EventClass::Load, EventKind::Entry, Space::User, start + ns, None);
        self.cursor = start + ns + 1000;
    }
}

/// One golden cell: where it lives under the fixture root and its log.
#[derive(Debug, Clone)]
pub struct GoldenCell {
    pub runtime: String,
    pub spec: WorkloadSpec,
    pub log: EventLog,
}

impl GoldenCell {
    pub fn dir(&self) -> PathBuf {
        Path::new(&self.runtime).join(self.spec.label())
    }
}

fn cell(profile: &RuntimeProfile, spec: WorkloadSpec, fill: impl FnOnce(&mut Synth)) -> GoldenCell {
    let mut s = Synth::new(profile, spec.kind);
    s.startup(profile);
    fill(&mut s);
    // synthetic wall clock: WASI work is 60% of the run
    let total_ns = (s.user_ns as f64 / 0.6).round() as u64;
    let mut log = EventLog::default();
    for (k, v) in [
        ("runtime", profile.name.clone()),
        ("workload", spec.kind.to_string()),
        ("file_size_bytes", spec.file_size_bytes.to_string()),
        ("chunk_bytes", spec.chunk_bytes.to_string()),
        ("rep", "0".to_string()),
        ("total_ns", total_ns.to_string()),
        ("exit_code", "0".to_string()),
    ] {
        log.meta.insert(k.to_string(), v);
    }
    s.events.sort_by_key(|e| e.ts_ns);
    log.events = s.events;
    GoldenCell {
        runtime: profile.name.clone(),
        spec,
        log,
    }
}

fn lookup(table: &[(&str, f64)], runtime: &str) -> f64 {
    table.iter().find(|(rt, _)| *rt == runtime).map(|(_, v)| *v).expect("runtime in table")
}

/// Every golden cell, in runtime then workload order.
pub fn golden_cells() -> Vec<GoldenCell> {
    let mut out = Vec::new();
    let loops = u64::from(DEFAULT_LOOP_COUNT);
    for r in FREAD_100GIB {
        let p = builtin_profile(r.runtime).expect("builtin");
        let spec = workload(WorkloadKind::Fread, 100 * GIB, 4096);
        out.push(cell(&p, spec, |s| {
            s.calls(
                &p,
                EventClass::Read,
                scaled(r.wasi_count, FREAD_SCALE),
                average_ns(r.wasi_s, r.wasi_count),
                scaled(r.syscall_count, FREAD_SCALE),
                average_ns(r.syscall_s, r.syscall_count),
                Some(4096),
            )
        }));
    }
    for r in FWRITE_99GIB {
        let p = builtin_profile(r.runtime).expect("builtin");
        let spec = workload(WorkloadKind::Fwrite, 99 * GIB, 61);
        out.push(cell(&p, spec, |s| {
            s.calls(
                &p,
                EventClass::Write,
                scaled(r.wasi_count, FWRITE_SCALE),
                average_ns(r.wasi_s, r.wasi_count),
                scaled(r.syscall_count, FWRITE_SCALE),
                average_ns(r.syscall_s, r.syscall_count),
                Some(61),
            )
        }));
    }
    for (rt, _) in FSEEK_S {
        let p = builtin_profile(rt).expect("builtin");
        let spec = workload(WorkloadKind::Fseek, GIB, 4096);
        let wasi = average_ns(lookup(&FSEEK_S, rt), loops);
        out.push(cell(&p, spec, |s| s.calls(&p, EventClass::Seek, loops, wasi, loops, (wasi / 3).max(1), None)));
    }
    for (rt, _) in FOPEN_S {
        let p = builtin_profile(rt).expect("builtin");
        let spec = workload(WorkloadKind::OpenClose, 47 * GIB / 10, 4096);
        let open = average_ns(lookup(&FOPEN_S, rt), loops);
        let close = average_ns(lookup(&FCLOSE_S, rt), loops);
        out.push(cell(&p, spec, |s| {
            // interleave open/close per iteration
            for _ in 0..loops {
                s.calls(&p, EventClass::Open, 1, open, 1, (open / 3).max(1), None);
                s.calls(&p, EventClass::Close, 1, close, 1, (close / 3).max(1), None);
            }
        }));
    }
    out.sort_by(|a, b| (&a.runtime, a.spec.kind).cmp(&(&b.runtime, b.spec.kind)));
    out
}

/// Writes `<root>/<runtime>/<cell>/rep-00.log` for every golden cell.
pub fn write_fixtures(root: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let mut written = Vec::new();
    for c in golden_cells() {
        let dir = root.join(c.dir());
        std::fs::create_dir_all(&dir).map_err(|source| ReportError::PathNotWritable {
            path: dir.clone(),
            source,
        })?;
        let path = dir.join("rep-00.log");
        write_event_log(&c.log, &path)?;
        written.push(path);
    }
    Ok(written)
}
