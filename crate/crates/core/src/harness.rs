//! Test inputs, test-program compilation, the measurement matrix, and
//! running one matrix cell live or from recorded logs.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::collector::{self, CollectMode, CollectorError, CollectorOptions};
use crate::fixtures::{workload, GIB, MIB};
use crate::model::{
    RepetitionRecord, RuntimeProfile, SessionManifest, SessionResult, WorkloadError, WorkloadKind,
    WorkloadSpec, DEFAULT_LOOP_COUNT,
};
use crate::pipeline::{compute_startup, filter_process, pair_intervals, ProcessSelector};
use crate::report::{read_event_log, write_event_log, EventLog, ReportError};

pub const DEFAULT_RECORD_WIDTH: u64 = 61;
pub const DEFAULT_REPS: u32 = 10;
pub const SEEK_STEP: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("input size must be positive")]
    ZeroSize,
    #[error("record width must be at least 2, got {0}")]
    RecordWidth(u64),
    #[error("{0}: no space left on device")]
    DiskFull(PathBuf),
    #[error("{path}: cannot write: {source}")]
    PathNotWritable {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("no {0} toolchain is configured")]
    ToolchainMissing(Target),
    #[error("compilation failed: {command}\n{diagnostics}")]
    CompileFailed { command: String, diagnostics: String },
    #[error("matrix has no {0}")]
    EmptyConfig(&'static str),
    #[error("invalid size {0:?}")]
    BadSize(String),
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("replay log {0} is missing")]
    ReplayLogMissing(PathBuf),
    #[error("{path}: missing metadata key {key:?}")]
    MissingMetadata { path: PathBuf, key: &'static str },
    #[error("repetition count must be at least 1")]
    ZeroReps,
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Collector(#[from] CollectorError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

fn write_error(path: &Path) -> impl Fn(io::Error) -> HarnessError + '_ {
    move |e| {
        if e.raw_os_error() == Some(libc::ENOSPC) {
            HarnessError::DiskFull(path.to_path_buf())
        } else {
            HarnessError::PathNotWritable {
                path: path.to_path_buf(),
                source: e,
            }
        }
    }
}

/// Parses `1037`, `64MiB`, `4.7GiB`, `48M` and the like. Decimal-looking
/// suffixes (`GB`) are read as binary units.
pub fn parse_size(text: &str) -> Result<u64, HarnessError> {
    let bad = || HarnessError::BadSize(text.to_string());
    let t = text.trim();
    let split = t.find(|c: char| !(c.is_ascii_digit() || c == '.')).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let mult: u64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kb" | "kib" => 1 << 10,
        "m" | "mb" | "mib" => 1 << 20,
        "g" | "gb" | "gib" => 1 << 30,
        "t" | "tb" | "tib" => 1 << 40,
        _ => return Err(bad()),
    };
    if num.is_empty() {
        return Err(bad());
    }
    if let Ok(n) = num.parse::<u64>() {
        return n.checked_mul(mult).ok_or_else(bad);
    }
    let f: f64 = num.parse().map_err(|_| bad())?;
    let v = (f * mult as f64).floor();
    if !v.is_finite() || v > u64::MAX as f64 {
        return Err(bad());
    }
    Ok(v as u64)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";

/// Byte at `offset` of the generated input: printable except for the last
/// byte of each record, which is a newline.
pub fn input_byte(offset: u64, record_width: u64) -> u8 {
    if offset % record_width == record_width - 1 {
        b'\n'
    } else {
        ALPHABET[(splitmix64(offset) % ALPHABET.len() as u64) as usize]
    }
}

/// Writes exactly `size_bytes` of generated records and returns the
/// SHA-256 of the content.
pub fn generate_input(path: &Path, size_bytes: u64, record_width: u64) -> Result<String, HarnessError> {
    if size_bytes == 0 {
        return Err(HarnessError::ZeroSize);
    }
    if record_width < 2 {
        return Err(HarnessError::RecordWidth(record_width));
    }
    let err = write_error(path);
    let file = fs::File::create(path).map_err(&err)?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let mut hash = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut offset = 0u64;
    while offset < size_bytes {
        let n = (size_bytes - offset).min(buf.len() as u64) as usize;
        for (i, b) in buf[..n].iter_mut().enumerate() {
            *b = input_byte(offset + i as u64, record_width);
        }
        w.write_all(&buf[..n]).map_err(&err)?;
        hash.update(&buf[..n]);
        offset += n as u64;
    }
    w.flush().map_err(&err)?;
    Ok(hex::encode(hash.finalize()))
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut f = fs::File::open(path)?;
    let mut hash = Sha256::new();
    io::copy(&mut f, &mut hash)?;
    Ok(hex::encode(hash.finalize()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Wasm,
    Native,
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Target::Wasm => "wasm",
            Target::Native => "native",
        })
    }
}

/// Compiler command templates with `{src}` and `{out}` placeholders, run
/// through `/bin/sh -c`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolchainConfig {
    pub wasm: Option<String>,
    pub native: Option<String>,
}

fn shell_quote(s: &str) -> String {
    if !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b"/._-+=:,".contains(&b)) {
        s.to_string()
    } else {
        format!("'{}'", s.replace('\'', r"'\''"))
    }
}

/// Compiles the workload's test program; returns the artifact and the exact
/// command line that produced it.
pub fn compile_case(
    spec: &WorkloadSpec,
    target: Target,
    toolchains: &ToolchainConfig,
) -> Result<(PathBuf, String), HarnessError> {
    let template = match target {
        Target::Wasm => toolchains.wasm.as_deref(),
        Target::Native => toolchains.native.as_deref(),
    }
    .filter(|t| !t.trim().is_empty())
    .ok_or(HarnessError::ToolchainMissing(target))?;
    let out = match target {
        Target::Wasm => &spec.wasm_module,
        Target::Native => &spec.native_binary,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(write_error(dir))?;
    }
    let command = template
        .replace("{src}", &shell_quote(&spec.source_path.to_string_lossy()))
        .replace("{out}", &shell_quote(&out.to_string_lossy()));
    let output = Command::new("/bin/sh")
        .arg("-c")
        .arg(&command)
        .output()
        .map_err(|e| HarnessError::CompileFailed {
            command: command.clone(),
            diagnostics: e.to_string(),
        })?;
    if !output.status.success() || !out.is_file() {
        let mut diagnostics = String::from_utf8_lossy(&output.stderr).into_owned();
        if diagnostics.trim().is_empty() {
            diagnostics = format!("{} (no artifact at {})", output.status, out.display());
        }
        return Err(HarnessError::CompileFailed { command, diagnostics });
    }
    Ok((out.clone(), command))
}

/// `full` runs the large-file matrix, `desk` a small one that fits a workstation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Full,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub kind: WorkloadKind,
    /// Size strings such as `1GiB`; the preset's sizes when absent.
    pub sizes: Option<Vec<String>>,
    pub chunk: Option<u64>,
    pub record_width: Option<u64>,
    pub loop_count: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Live,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub runtimes: Vec<String>,
    pub workloads: Vec<WorkloadConfig>,
    #[serde(default = "default_reps")]
    pub reps: u32,
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default)]
    pub preset: Preset,
    pub replay_dir: Option<PathBuf>,
    #[serde(default)]
    pub toolchains: ToolchainConfig,
    /// Run the target in accumulation mode.
    #[serde(default)]
    pub accumulate: bool,
    pub timeout_s: Option<u64>,
}

fn default_reps() -> u32 {
    DEFAULT_REPS
}

impl MatrixConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config {
            path: origin.to_path_buf(),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text, path)
    }
}

/// 4.7 GiB, rounded down to a byte.
pub const SIZE_4_7_GIB: u64 = 47 * GIB / 10;

pub fn default_sizes(kind: WorkloadKind, preset: Preset) -> Vec<u64> {
    match (preset, kind) {
        (Preset::Full, WorkloadKind::Fread) => vec![GIB, 10 * GIB, 100 * GIB],
        (Preset::Full, WorkloadKind::Fwrite) => vec![48 * MIB, SIZE_4_7_GIB, 11 * GIB, 99 * GIB],
        (Preset::Full, WorkloadKind::Fseek) => vec![GIB],
        (Preset::Full, WorkloadKind::OpenClose) => vec![SIZE_4_7_GIB],
        (Preset::Desk, WorkloadKind::Fread | WorkloadKind::Fwrite) => vec![64 * MIB, 256 * MIB, GIB],
        (Preset::Desk, WorkloadKind::Fseek | WorkloadKind::OpenClose) => vec![64 * MIB],
    }
}

/// Sizes whose cells also record startup time.
pub fn startup_sizes(kind: WorkloadKind) -> &'static [u64] {
    match kind {
        WorkloadKind::Fread => &[GIB, 10 * GIB],
        WorkloadKind::Fwrite => &[48 * MIB, SIZE_4_7_GIB],
        _ => &[],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixCell {
    pub runtime: String,
    pub spec: WorkloadSpec,
    pub record_width: u64,
    pub measure_startup: bool,
}

/// Seek position of iteration `i` in the fseek workload.
pub fn seek_offset(i: u64) -> u64 {
    i * SEEK_STEP
}

/// Runtimes × workloads × sizes, in configuration order.
pub fn plan_matrix(config: &MatrixConfig) -> Result<Vec<MatrixCell>, HarnessError> {
    if config.runtimes.is_empty() {
        return Err(HarnessError::EmptyConfig("runtimes"));
    }
    if config.workloads.is_empty() {
        return Err(HarnessError::EmptyConfig("workloads"));
    }
    if config.reps == 0 {
        return Err(HarnessError::ZeroReps);
    }
    let mut cells = Vec::new();
    for runtime in &config.runtimes {
        for w in &config.workloads {
            let sizes = match &w.sizes {
                Some(s) => s.iter().map(|s| parse_size(s)).collect::<Result<Vec<_>, _>>()?,
                None => default_sizes(w.kind, config.preset),
            };
            let record_width = w.record_width.unwrap_or(DEFAULT_RECORD_WIDTH);
            if record_width < 2 {
                return Err(HarnessError::RecordWidth(record_width));
            }
            let chunk = w.chunk.unwrap_or(match w.kind {
                WorkloadKind::Fwrite => record_width,
                _ => 4096,
            });
            for size in sizes {
                let mut spec = workload(w.kind, size, chunk);
                spec.loop_count = w.loop_count.unwrap_or(DEFAULT_LOOP_COUNT);
                spec.validate()?;
                cells.push(MatrixCell {
                    runtime: runtime.clone(),
                    measure_startup: config.preset == Preset::Full && startup_sizes(w.kind).contains(&size),
                    spec,
                    record_width,
                });
            }
        }
    }
    Ok(cells)
}

/// Arguments the test programs in `cases/` take.
pub fn case_args(spec: &WorkloadSpec, data_file: &str, record_width: u64) -> Vec<String> {
    match spec.kind {
        WorkloadKind::Fread => vec![data_file.into(), spec.chunk_bytes.to_string()],
        WorkloadKind::Fwrite => vec![
            data_file.into(),
            spec.file_size_bytes.to_string(),
            record_width.to_string(),
        ],
        WorkloadKind::Fseek => vec![data_file.into(), spec.loop_count.to_string(), SEEK_STEP.to_string()],
        WorkloadKind::OpenClose => vec![data_file.into(), spec.loop_count.to_string()],
    }
}

pub fn log_name(rep: u32) -> String {
    format!("rep-{rep:02}.log")
}

/// How repetitions are obtained.
#[derive(Debug, Clone)]
pub enum Backend {
    Live(LiveBackend),
    /// A directory of `rep-NN.log` files.
    Replay(PathBuf),
}

#[derive(Debug, Clone)]
pub struct LiveBackend {
    pub options: CollectorOptions,
    /// Object the user-space hooks live in.
    pub binary: PathBuf,
    pub command: Vec<String>,
    pub timeout: Duration,
    /// Where per-repetition logs go (per-event mode).
    pub log_dir: Option<PathBuf>,
}

/// What the manifest records beyond the runtime command.
#[derive(Debug, Clone, Default)]
pub struct Provenance {
    pub compile_commands: Vec<String>,
    pub input_sha256: Option<String>,
}

/// Turns one recorded execution into a repetition record.
pub fn replay_repetition(log: &EventLog, profile: &RuntimeProfile) -> RepetitionRecord {
    let events = if profile.comm_filter.is_empty() {
        log.events.clone()
    } else {
        filter_process(log.events.clone(), &ProcessSelector::Comm(profile.comm_filter.clone()))
    };
    let (startup, io): (Vec<_>, Vec<_>) = events.into_iter().partition(|e| e.class.is_startup());
    let pairing = pair_intervals(&io);
    let span = match (io.iter().map(|e| e.ts_ns).min(), io.iter().map(|e| e.ts_ns).max()) {
        (Some(a), Some(b)) => b - a,
        _ => 0,
    };
    RepetitionRecord {
        total_ns: log.meta_u64("total_ns").unwrap_or(span),
        startup_ns: compute_startup(&startup, profile).ok(),
        metrics: pairing.metrics,
        unmatched_entries: pairing.diagnostics.unmatched_entries,
        orphan_exits: pairing.diagnostics.orphan_exits,
        clock_violations: pairing.diagnostics.clock_violations,
        lost_events: log.meta_u64("lost_events").unwrap_or(0),
    }
}

/// Number of consecutive `rep-NN.log` files in `dir`, starting at 00.
pub fn available_reps(dir: &Path) -> u32 {
    (0..).find(|r| !dir.join(log_name(*r)).is_file()).unwrap_or(0)
}

/// Workload and runtime recorded in a log's metadata.
pub fn spec_from_log(log: &EventLog, path: &Path) -> Result<(Option<String>, WorkloadSpec), HarnessError> {
    let missing = |key| HarnessError::MissingMetadata {
        path: path.to_path_buf(),
        key,
    };
    let kind: WorkloadKind = log
        .meta
        .get("workload")
        .and_then(|k| k.parse().ok())
        .ok_or_else(|| missing("workload"))?;
    let size = log.meta_u64("file_size_bytes").ok_or_else(|| missing("file_size_bytes"))?;
    let chunk = log.meta_u64("chunk_bytes").unwrap_or(4096);
    Ok((log.meta.get("runtime").cloned(), workload(kind, size, chunk)))
}

/// Executes or replays `reps` repetitions of one cell.
pub fn run_cell(
    profile: &RuntimeProfile,
    spec: &WorkloadSpec,
    reps: u32,
    backend: &Backend,
    provenance: &Provenance,
) -> Result<SessionResult, HarnessError> {
    if reps == 0 {
        return Err(HarnessError::ZeroReps);
    }
    spec.validate()?;
    let mut manifest = SessionManifest {
        profile: profile.name.clone(),
        compile_commands: provenance.compile_commands.clone(),
        runtime_command: Vec::new(),
        input_sha256: provenance.input_sha256.clone(),
        logs: Vec::new(),
    };
    let mut repetitions = Vec::new();
    match backend {
        Backend::Replay(dir) => {
            let paths: Vec<PathBuf> = (0..reps).map(|r| dir.join(log_name(r))).collect();
            if let Some(missing) = paths.iter().find(|p| !p.is_file()) {
                return Err(HarnessError::ReplayLogMissing(missing.clone()));
            }
            for path in paths {
                let log = read_event_log(&path)?;
                if manifest.runtime_command.is_empty() {
                    if let Some(cmd) = log.meta.get("command") {
                        manifest.runtime_command = cmd.split(' ').map(str::to_string).collect();
                    }
                }
                repetitions.push(replay_repetition(&log, profile));
                manifest.logs.push(path.to_string_lossy().into_owned());
            }
        }
        Backend::Live(live) => {
            manifest.runtime_command = live.command.clone();
            let mut handle = collector::attach(profile, &live.binary, None, live.options.clone())?;
            if let Some(dir) = &live.log_dir {
                fs::create_dir_all(dir).map_err(write_error(dir))?;
            }
            for rep in 0..reps {
                let c = collector::run_and_collect(&mut handle, &live.command, live.timeout)?;
                let mut log = EventLog {
                    meta: Default::default(),
                    events: c.events,
                };
                for (k, v) in [
                    ("runtime", profile.name.clone()),
                    ("workload", spec.kind.to_string()),
                    ("file_size_bytes", spec.file_size_bytes.to_string()),
                    ("chunk_bytes", spec.chunk_bytes.to_string()),
                    ("rep", rep.to_string()),
                    ("total_ns", c.wall_total_ns.to_string()),
                    ("exit_code", c.exit_code.map_or("none".into(), |v| v.to_string())),
                    ("lost_events", c.lost_events.to_string()),
                    ("command", live.command.join(" ")),
                ] {
                    log.meta.insert(k.to_string(), v);
                }
                let mut record = replay_repetition(&log, profile);
                if let Some(metrics) = c.metrics {
                    record.metrics = metrics;
                    record.unmatched_entries = c.unmatched_entries;
                }
                if let (Some(dir), CollectMode::PerEvent) = (&live.log_dir, live.options.mode) {
                    let path = dir.join(log_name(rep));
                    write_event_log(&log, &path)?;
                    manifest.logs.push(path.to_string_lossy().into_owned());
                }
                repetitions.push(record);
            }
            collector::detach(&mut handle);
        }
    }
    Ok(SessionResult::new(profile.name.clone(), spec.clone(), repetitions, manifest))
}
