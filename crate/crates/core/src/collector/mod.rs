//! Live collection through kernel dynamic probes.
//!
//! User-space hooks become uprobe/uretprobe pairs at the resolved file
//! offset of each WASI symbol, syscall hooks become kprobe/kretprobe pairs,
//! and the startup symbols get entry-only uprobes. Events are scoped to the
//! launched process tree by pid, timestamped by the kernel on the monotonic
//! clock, and read back from `trace_pipe`.
//!
//! The target is started behind a small shell stub that waits on stdin, so
//! the pid filter is in place before the real command is exec'd. Events the
//! stub itself triggers are discarded by cutting the stream at the exec.

pub mod accumulate;
pub mod tracefs;
pub mod wire;

use std::collections::HashSet;
use std::io::{self, Read, Write};
use std::os::unix::fs::OpenOptionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::model::{EventClass, EventKind, MetricMap, RuntimeProfile, Space, TraceEvent, COMM_LEN};
use crate::registry::{file_offset, resolve_in_object, RegistryError};

use accumulate::{AccumulatorStats, DepthAccumulator};
use tracefs::{event_name, parse_event_name, parse_trace_line, read_kallsyms, Tracefs};
use wire::EntryKey;

#[derive(Debug, Error)]
pub enum CollectorError {
    #[error("no kernel tracing filesystem is mounted")]
    TracingUnavailable,
    #[error("permission denied: {0} (root or CAP_PERFMON and tracefs access are required)")]
    PermissionDenied(PathBuf),
    #[error(transparent)]
    SymbolResolution(#[from] RegistryError),
    #[error("kernel symbol {0:?} does not exist")]
    KernelSymbolMissing(String),
    #[error("{requested} probes requested, limit is {limit}")]
    ProbeLimitExceeded { requested: usize, limit: usize },
    #[error("target did not exit within {0:?}; it was killed")]
    Timeout(Duration, Box<Collected>),
    #[error("cannot start {command:?}: {source}")]
    SpawnFailure {
        command: String,
        #[source]
        source: io::Error,
    },
    #[error("collector handle was already detached")]
    UseAfterDetach,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProbeTarget {
    User { object: PathBuf, offset: u64 },
    Kernel { symbol: String },
}

/// One attached probe (or probe pair).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSpec {
    pub index: u32,
    pub probe_id: String,
    pub class: EventClass,
    pub space: Space,
    pub target: ProbeTarget,
    pub has_exit: bool,
}

impl ProbeSpec {
    pub(crate) fn synthetic(index: u32, probe_id: &str, class: EventClass, space: Space) -> Self {
        ProbeSpec {
            index,
            probe_id: probe_id.to_string(),
            class,
            space,
            target: ProbeTarget::Kernel {
                symbol: probe_id.to_string(),
            },
            has_exit: true,
        }
    }

    /// Lines for `uprobe_events`/`kprobe_events` that create this probe.
    pub fn definitions(&self, group: &str) -> Vec<String> {
        let entry = event_name(self.index, EventKind::Entry);
        let exit = event_name(self.index, EventKind::Exit);
        let (loc, ret) = match &self.target {
            ProbeTarget::User { object, offset } => (format!("{}:0x{offset:x}", object.display()), ""),
            ProbeTarget::Kernel { symbol } => (symbol.clone(), " ret=$retval"),
        };
        let mut out = vec![format!("p:{group}/{entry} {loc}")];
        if self.has_exit {
            out.push(format!("r:{group}/{exit} {loc}{ret}"));
        }
        out
    }

    pub fn removals(&self, group: &str) -> Vec<String> {
        let mut out = vec![format!("-:{group}/{}", event_name(self.index, EventKind::Entry))];
        if self.has_exit {
            out.push(format!("-:{group}/{}", event_name(self.index, EventKind::Exit)));
        }
        out
    }

    fn events_file(&self) -> &'static str {
        match self.target {
            ProbeTarget::User { .. } => "uprobe_events",
            ProbeTarget::Kernel { .. } => "kprobe_events",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CollectMode {
    /// Every entry and exit is returned (and can be logged).
    #[default]
    PerEvent,
    /// Only per-probe aggregates are returned.
    Accumulate,
}

#[derive(Debug, Clone)]
pub struct CollectorOptions {
    /// Tracing filesystem; located automatically when unset.
    pub tracefs: Option<PathBuf>,
    pub kallsyms: PathBuf,
    /// Probe group name; derived from our pid when unset.
    pub group: Option<String>,
    pub max_probes: usize,
    pub grace: Duration,
    pub mode: CollectMode,
    /// Check the effective uid before touching tracefs.
    pub require_root: bool,
    /// Working directory of the target.
    pub workdir: Option<PathBuf>,
}

impl Default for CollectorOptions {
    fn default() -> Self {
        CollectorOptions {
            tracefs: None,
            kallsyms: PathBuf::from("/proc/kallsyms"),
            group: None,
            max_probes: 128,
            grace: Duration::from_millis(200),
            mode: CollectMode::PerEvent,
            require_root: true,
            workdir: None,
        }
    }
}

/// The result of one collected execution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Collected {
    /// Sorted by timestamp; empty in accumulation mode.
    pub events: Vec<TraceEvent>,
    /// Aggregates, in accumulation mode only.
    pub metrics: Option<MetricMap>,
    pub accumulator: Option<AccumulatorStats>,
    pub unmatched_entries: u64,
    pub exit_code: Option<i32>,
    pub wall_total_ns: u64,
    pub lost_events: u64,
    pub timed_out: bool,
}

/// Resolves every probe a profile needs in `binary` (the runtime, or the
/// native test program itself).
pub fn plan_probes(
    profile: &RuntimeProfile,
    binary: &Path,
    kernel_symbols: Option<&HashSet<String>>,
) -> Result<Vec<ProbeSpec>, CollectorError> {
    let mut out = Vec::new();
    let user = |pattern: &str, class: EventClass, has_exit: bool, out: &mut Vec<ProbeSpec>| {
        let r = resolve_in_object(binary, pattern)?;
        let offset = file_offset(&r.object, r.address)?;
        out.push(ProbeSpec {
            index: out.len() as u32,
            probe_id: r.name,
            class,
            space: Space::User,
            target: ProbeTarget::User {
                object: r.object,
                offset,
            },
            has_exit,
        });
        Ok::<_, CollectorError>(())
    };
    for hook in &profile.wasi_hooks {
        user(&hook.symbol_pattern, hook.class, true, &mut out)?;
    }
    user(&profile.init_symbol, EventClass::Init, false, &mut out)?;
    user(&profile.load_symbol, EventClass::Load, false, &mut out)?;
    for hook in &profile.syscall_hooks {
        if let Some(known) = kernel_symbols {
            if !known.contains(&hook.kernel_symbol) {
                return Err(CollectorError::KernelSymbolMissing(hook.kernel_symbol.clone()));
            }
        }
        out.push(ProbeSpec {
            index: out.len() as u32,
            probe_id: hook.kernel_symbol.clone(),
            class: hook.class,
            space: Space::Kernel,
            target: ProbeTarget::Kernel {
                symbol: hook.kernel_symbol.clone(),
            },
            has_exit: true,
        });
    }
    Ok(out)
}

fn probe_count(probes: &[ProbeSpec]) -> usize {
    probes.iter().map(|p| 1 + usize::from(p.has_exit)).sum()
}

const EXEC_EVENT: &str = "events/sched/sched_process_exec/enable";

/// Attached probes. Detached on drop.
#[derive(Debug)]
pub struct CollectorHandle {
    tracefs: Tracefs,
    group: String,
    probes: Vec<ProbeSpec>,
    options: CollectorOptions,
    attached: bool,
    comm_filter: String,
}

impl CollectorHandle {
    pub fn probes(&self) -> &[ProbeSpec] {
        &self.probes
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn is_attached(&self) -> bool {
        self.attached
    }
}

/// Resolves and installs all probes of `profile` against `binary`.
pub fn attach(
    profile: &RuntimeProfile,
    binary: &Path,
    target_pid: Option<u32>,
    options: CollectorOptions,
) -> Result<CollectorHandle, CollectorError> {
    let tracefs = match &options.tracefs {
        Some(root) => Tracefs::at(root),
        None => Tracefs::locate().ok_or(CollectorError::TracingUnavailable)?,
    };
    // SAFETY: geteuid has no preconditions.
    if options.require_root && unsafe { libc::geteuid() } != 0 {
        return Err(CollectorError::PermissionDenied(tracefs.root.clone()));
    }
    let kernel_symbols = read_kallsyms(&options.kallsyms);
    let probes = plan_probes(profile, binary, kernel_symbols.as_ref())?;
    let requested = probe_count(&probes);
    if requested > options.max_probes {
        return Err(CollectorError::ProbeLimitExceeded {
            requested,
            limit: options.max_probes,
        });
    }
    let group = options
        .group
        .clone()
        .unwrap_or_else(|| format!("wasiprof_{}", std::process::id()));
    let mut handle = CollectorHandle {
        tracefs,
        group,
        probes: Vec::new(),
        options,
        attached: true,
        comm_filter: profile.comm_filter.clone(),
    };
    for p in probes {
        let file = p.events_file();
        for def in p.definitions(&handle.group) {
            if let Err(e) = handle.tracefs.append(file, &format!("{def}\n")) {
                let err = match (&p.target, e) {
                    (ProbeTarget::Kernel { symbol }, CollectorError::Io { source, .. })
                        if matches!(source.raw_os_error(), Some(libc::ENOENT) | Some(libc::EINVAL)) =>
                    {
                        CollectorError::KernelSymbolMissing(symbol.clone())
                    }
                    (_, CollectorError::Io { source, .. }) if source.raw_os_error() == Some(libc::ENOSPC) => {
                        CollectorError::ProbeLimitExceeded {
                            requested,
                            limit: handle.probes.len(),
                        }
                    }
                    (_, e) => e,
                };
                // created so far, including the half-defined probe
                handle.probes.push(p);
                detach(&mut handle);
                return Err(err);
            }
        }
        handle.probes.push(p);
    }
    handle.tracefs.write("trace_clock", "mono\n")?;
    handle.tracefs.write("options/record-tgid", "1\n")?;
    handle.tracefs.write("options/event-fork", "1\n")?;
    if let Some(pid) = target_pid {
        handle.tracefs.write("set_event_pid", &format!("{pid}\n"))?;
        enable(&handle, true)?;
    }
    Ok(handle)
}

fn enable(handle: &CollectorHandle, on: bool) -> Result<(), CollectorError> {
    let v = if on { "1\n" } else { "0\n" };
    // absent on kernels without the tracepoint; the stub cut is skipped then
    let _ = handle.tracefs.write(EXEC_EVENT, v);
    handle.tracefs.write(&format!("events/{}/enable", handle.group), v)
}

/// Removes every probe the handle installed. Idempotent.
pub fn detach(handle: &mut CollectorHandle) {
    if !handle.attached {
        return;
    }
    handle.attached = false;
    let _ = enable(handle, false);
    let _ = handle.tracefs.write("set_event_pid", "");
    for p in handle.probes.iter().rev() {
        for line in p.removals(&handle.group) {
            let _ = handle.tracefs.append(p.events_file(), &format!("{line}\n"));
        }
    }
}

impl Drop for CollectorHandle {
    fn drop(&mut self) {
        detach(self);
    }
}

/// The kernel's view of a command name.
fn exec_comm(program: &str) -> String {
    let base = Path::new(program)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    base.chars().take(COMM_LEN).collect()
}

fn spawn_drain(path: PathBuf, stop: Arc<AtomicBool>) -> Result<thread::JoinHandle<String>, CollectorError> {
    let mut pipe = std::fs::OpenOptions::new()
        .read(true)
        .custom_flags(libc::O_NONBLOCK)
        .open(&path)
        .map_err(|e| tracefs::io_error(&path, e))?;
    Ok(thread::spawn(move || {
        let mut text = Vec::new();
        let mut buf = vec![0u8; 1 << 16];
        loop {
            match pipe.read(&mut buf) {
                Ok(n) if n > 0 => text.extend_from_slice(&buf[..n]),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                // empty or would block
                _ => {
                    if stop.load(Ordering::Acquire) {
                        break;
                    }
                    thread::sleep(Duration::from_millis(2));
                }
            }
        }
        String::from_utf8_lossy(&text).into_owned()
    }))
}

fn exit_code(status: ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}

/// Converts drained text into events of the target process tree.
pub fn decode_trace(text: &str, probes: &[ProbeSpec], root_pid: u32, comm: &str) -> Vec<TraceEvent> {
    let lines: Vec<_> = text.lines().filter_map(parse_trace_line).collect();
    let exec_ts = lines
        .iter()
        .find(|l| l.event == "sched_process_exec" && l.tid == root_pid)
        .map(|l| l.ts_ns);
    let mut out: Vec<TraceEvent> = lines
        .iter()
        .filter(|l| exec_ts.is_none_or(|t| l.ts_ns >= t))
        .filter_map(|l| {
            let (index, kind) = parse_event_name(&l.event)?;
            let p = probes.iter().find(|p| p.index == index)?;
            let size = match (p.space, kind) {
                (Space::Kernel, EventKind::Exit) => l.retval().and_then(|r| u64::try_from(r).ok()),
                _ => None,
            };
            Some(TraceEvent {
                ts_ns: l.ts_ns,
                pid: l.tgid.unwrap_or(l.tid),
                tid: l.tid,
                comm: comm.to_string(),
                probe_id: p.probe_id.clone(),
                class: p.class,
                kind,
                space: p.space,
                size_bytes: size,
            })
        })
        .collect();
    out.sort_by_key(|e| e.ts_ns);
    out
}

fn accumulate(events: &[TraceEvent], probes: &[ProbeSpec]) -> (MetricMap, AccumulatorStats, u64) {
    let mut acc = DepthAccumulator::new();
    for e in events.iter().filter(|e| !e.class.is_startup()) {
        let Some(p) = probes.iter().find(|p| p.probe_id == e.probe_id && p.space == e.space) else {
            continue;
        };
        let key = EntryKey {
            tid: e.tid,
            probe_index: p.index,
        };
        match e.kind {
            EventKind::Entry => acc.on_entry(key, e.ts_ns),
            EventKind::Exit => acc.on_exit(key, e.ts_ns),
        }
    }
    (acc.metrics(probes), acc.stats(), acc.unmatched_entries())
}

/// Runs `command` under the attached probes until it exits or `timeout`
/// passes, then drains buffered events for the grace period.
pub fn run_and_collect(
    handle: &mut CollectorHandle,
    command: &[String],
    timeout: Duration,
) -> Result<Collected, CollectorError> {
    if !handle.attached {
        return Err(CollectorError::UseAfterDetach);
    }
    let program = command.first().ok_or_else(|| CollectorError::SpawnFailure {
        command: String::new(),
        source: io::Error::new(io::ErrorKind::InvalidInput, "empty command"),
    })?;
    let spawn_err = |source| CollectorError::SpawnFailure {
        command: command.join(" "),
        source,
    };
    if !program.contains('/') && which(program).is_none() || program.contains('/') && !Path::new(program).is_file() {
        return Err(spawn_err(io::Error::new(io::ErrorKind::NotFound, "no such executable")));
    }
    let comm = if handle.comm_filter.is_empty() {
        exec_comm(program)
    } else {
        handle.comm_filter.clone()
    };

    let mut launcher = Command::new("/bin/sh");
    launcher
        .arg("-c")
        .arg("read _ && exec \"$@\"")
        .arg("wasiprof-launch")
        .args(command)
        .stdin(Stdio::piped());
    if let Some(dir) = &handle.options.workdir {
        launcher.current_dir(dir);
    }
    let mut child = launcher.spawn().map_err(spawn_err)?;
    let pid = child.id();
    let setup = (|| {
        handle.tracefs.write("set_event_pid", &format!("{pid}\n"))?;
        enable(handle, true)
    })();
    if let Err(e) = setup {
        let _ = child.kill();
        let _ = child.wait();
        return Err(e);
    }
    let overrun_before = handle.tracefs.overruns();
    let stop = Arc::new(AtomicBool::new(false));
    let drain = spawn_drain(handle.tracefs.path("trace_pipe"), stop.clone())?;

    let start = Instant::now();
    let mut stdin = child.stdin.take().expect("stdin is piped");
    let _ = stdin.write_all(b"go\n");
    drop(stdin);
    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(s)) => break Some(s),
            Ok(None) if start.elapsed() >= timeout => {
                timed_out = true;
                let _ = child.kill();
                break child.wait().ok();
            }
            Ok(None) => thread::sleep(Duration::from_millis(1)),
            Err(_) => break None,
        }
    };
    let wall_total_ns = start.elapsed().as_nanos() as u64;

    thread::sleep(handle.options.grace);
    stop.store(true, Ordering::Release);
    let text = drain.join().unwrap_or_default();
    let _ = enable(handle, false);
    let lost_events = handle.tracefs.overruns().saturating_sub(overrun_before);

    let events = decode_trace(&text, &handle.probes, pid, &comm);
    let mut collected = Collected {
        exit_code: status.map(exit_code),
        wall_total_ns,
        lost_events,
        timed_out,
        ..Default::default()
    };
    match handle.options.mode {
        CollectMode::PerEvent => collected.events = events,
        CollectMode::Accumulate => {
            let (metrics, stats, open) = accumulate(&events, &handle.probes);
            collected.metrics = Some(metrics);
            collected.accumulator = Some(stats);
            collected.unmatched_entries = open;
            // keep startup entries so startup time is still measurable
            collected.events = events.into_iter().filter(|e| e.class.is_startup()).collect();
        }
    }
    if timed_out {
        return Err(CollectorError::Timeout(timeout, Box::new(collected)));
    }
    Ok(collected)
}

fn which(program: &str) -> Option<PathBuf> {
    std::env::var_os("PATH")?
        .to_string_lossy()
        .split(':')
        .map(|d| Path::new(d).join(program))
        .find(|p| p.is_file())
}
