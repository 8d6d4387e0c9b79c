//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{analyze_sessions, Thresholds};
use crate::collector::{CollectMode, CollectorOptions};
use crate::harness::{
    self, available_reps, case_args, compile_case, generate_input, log_name, parse_size, plan_matrix,
    replay_repetition, run_cell, sha256_file, spec_from_log, Backend, BackendKind, HarnessError, LiveBackend,
    MatrixConfig, Provenance, Target,
};
use crate::model::{RuntimeProfile, SessionResult, WorkloadKind};
use crate::registry::{lookup_profile, resolve_in_object, file_offset, list_symbols, name_matches};
use crate::report::{
    emit_findings, emit_html_report, emit_metrics_csv, read_event_log, read_sessions, write_session,
    SESSION_SUFFIX,
};

#[derive(Debug, Parser)]
#[command(name = "wasiprof", version, about = "Profile WASI file I/O of WebAssembly runtimes")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run a workload matrix under live probes
    Profile(ProfileArgs),
    /// Rebuild sessions from recorded event logs
    Replay(ReplayArgs),
    /// Analyze sessions and emit the CSV, findings and HTML report
    Analyze(AnalyzeArgs),
    /// Write a deterministic test input
    GenInput(GenInputArgs),
    /// Resolve a symbol pattern in an object file
    Symbols(SymbolsArgs),
}

#[derive(Debug, Args)]
struct ProfileArgs {
    /// Built-in profile name or profile file
    #[arg(long)]
    profile: String,
    /// Matrix configuration file
    #[arg(long)]
    workload: PathBuf,
    /// Repetitions per cell (overrides the configuration)
    #[arg(long)]
    reps: Option<u32>,
    #[arg(long)]
    out: PathBuf,
    /// Runtime executable (overrides the profile's binary path)
    #[arg(long)]
    binary: Option<PathBuf>,
    /// Directory holding the test program sources
    #[arg(long, default_value = "cases")]
    cases: PathBuf,
    /// Emit only per-probe aggregates instead of every event
    #[arg(long)]
    accumulate: bool,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// A log file, a directory of rep-NN.log files, or a tree of such directories
    #[arg(long)]
    log: PathBuf,
    /// Profile name or file; defaults to the runtime recorded in each log
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Required repetitions per session; defaults to all present logs
    #[arg(long)]
    reps: Option<u32>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    sessions: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    findings: Option<PathBuf>,
    #[arg(long)]
    html: Option<PathBuf>,
    #[command(flatten)]
    thresholds: ThresholdArgs,
}

#[derive(Debug, Args)]
struct ThresholdArgs {
    /// Slope ratio above which growth is superlinear
    #[arg(long)]
    threshold_growth: Option<f64>,
    /// Allowed distance of the syscall/WASI ratio from 2
    #[arg(long)]
    threshold_doubling: Option<f64>,
    /// Distance within which a buffering ratio snaps to an integer
    #[arg(long)]
    threshold_snap: Option<f64>,
    /// Startup / fastest startup above which a runtime is flagged
    #[arg(long)]
    threshold_startup: Option<f64>,
    /// Native-vs-runtime buffering ratio factor flagged as a mismatch
    #[arg(long)]
    threshold_buffer: Option<f64>,
    /// Ratio to the fastest runtime flagged as extreme for auxiliary calls
    #[arg(long)]
    threshold_extreme: Option<f64>,
}

impl ThresholdArgs {
    fn resolve(&self) -> Thresholds {
        let mut t = Thresholds::default();
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut t.growth_ratio, self.threshold_growth);
        set(&mut t.doubling_tol, self.threshold_doubling);
        set(&mut t.snap, self.threshold_snap);
        set(&mut t.startup_factor, self.threshold_startup);
        set(&mut t.buffer_mismatch, self.threshold_buffer);
        set(&mut t.extreme_ratio, self.threshold_extreme);
        t
    }
}

#[derive(Debug, Args)]
struct GenInputArgs {
    /// Bytes, with an optional KiB/MiB/GiB suffix
    #[arg(long)]
    size: String,
    #[arg(long, default_value_t = harness::DEFAULT_RECORD_WIDTH)]
    record_width: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SymbolsArgs {
    #[arg(long)]
    binary: PathBuf,
    /// Pattern to resolve; lists every defined function when omitted
    #[arg(long)]
    pattern: Option<String>,
}

type CliResult = Result<(), String>;

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Cmd::Profile(a) => profile(a),
        Cmd::Replay(a) => replay(a),
        Cmd::Analyze(a) => analyze(a),
        Cmd::GenInput(a) => gen_input(a),
        Cmd::Symbols(a) => symbols(a),
    };
    match result {
        Ok(()) => 0,
        Err(msg) => {
            eprintln!("wasiprof: {msg}");
            1
        }
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gen_input(a: GenInputArgs) -> CliResult {
    let size = parse_size(&a.size).map_err(err)?;
    let hash = generate_input(&a.out, size, a.record_width).map_err(err)?;
    println!("{}  {} bytes  sha256:{hash}", a.out.display(), size);
    Ok(())
}

fn symbols(a: SymbolsArgs) -> CliResult {
    let Some(pattern) = a.pattern else {
        let table = list_symbols(&a.binary).map_err(err)?;
        for e in &table.entries {
            println!("{:#x} {}", e.address, e.name);
        }
        return Ok(());
    };
    // every match is shown; ambiguity is still an error
    if let Ok(table) = list_symbols(&a.binary) {
        for e in table.entries.iter().filter(|e| name_matches(&e.name, &pattern)) {
            eprintln!("candidate: {:#x} {}", e.address, e.name);
        }
    }
    let r = resolve_in_object(&a.binary, &pattern).map_err(err)?;
    let offset = file_offset(&r.object, r.address).map_err(err)?;
    println!("{} {:#x} offset={:#x} {}", r.name, r.address, offset, r.object.display());
    Ok(())
}

fn load_sessions(dir: &Path) -> Result<Vec<SessionResult>, String> {
    if !dir.is_dir() {
        return Err(format!("{}: not a directory", dir.display()));
    }
    read_sessions(dir).map_err(err)
}

fn analyze(a: AnalyzeArgs) -> CliResult {
    let sessions = load_sessions(&a.sessions)?;
    let analysis = analyze_sessions(&sessions, &a.thresholds.resolve());
    if let Some(p) = &a.csv {
        emit_metrics_csv(&sessions, p).map_err(err)?;
    }
    if let Some(p) = &a.findings {
        emit_findings(&analysis.findings, p).map_err(err)?;
    }
    if let Some(p) = &a.html {
        emit_html_report(&sessions, &analysis, p).map_err(err)?;
    }
    println!("{} sessions, {} findings", sessions.len(), analysis.findings.len());
    for f in &analysis.findings {
        println!("{}: {}", f.kind, f.message);
    }
    Ok(())
}

/// Directories under `root` (inclusive) that hold a `rep-00.log`.
fn session_dirs(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(log_name(0)).is_file() {
            out.push(dir.clone());
        }
        if let Ok(rd) = fs::read_dir(&dir) {
            stack.extend(rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()));
        }
    }
    out.sort();
    out
}

fn profile_for(explicit: Option<&str>, recorded: Option<&str>, origin: &Path) -> Result<RuntimeProfile, String> {
    let name = explicit
        .or(recorded)
        .ok_or_else(|| format!("{}: no --profile given and no runtime recorded", origin.display()))?;
    lookup_profile(name).map_err(err)
}

fn replay(a: ReplayArgs) -> CliResult {
    if !a.log.exists() {
        return Err(err(HarnessError::ReplayLogMissing(a.log.clone())));
    }
    let mut written = 0;
    if a.log.is_file() {
        let log = read_event_log(&a.log).map_err(err)?;
        let (runtime, spec) = spec_from_log(&log, &a.log).map_err(err)?;
        let profile = profile_for(a.profile.as_deref(), runtime.as_deref(), &a.log)?;
        let mut session = SessionResult::new(
            profile.name.clone(),
            spec,
            vec![replay_repetition(&log, &profile)],
            Default::default(),
        );
        session.manifest.profile = profile.name.clone();
        session.manifest.logs = vec![a.log.to_string_lossy().into_owned()];
        write_session(&session, &a.out).map_err(err)?;
        written += 1;
    } else {
        let dirs = session_dirs(&a.log);
        if dirs.is_empty() {
            return Err(err(HarnessError::ReplayLogMissing(a.log.join(log_name(0)))));
        }
        for dir in dirs {
            let first = dir.join(log_name(0));
            let log = read_event_log(&first).map_err(err)?;
            let (runtime, spec) = spec_from_log(&log, &first).map_err(err)?;
            let profile = profile_for(a.profile.as_deref(), runtime.as_deref(), &first)?;
            let reps = a.reps.unwrap_or_else(|| available_reps(&dir));
            let session = run_cell(&profile, &spec, reps, &Backend::Replay(dir.clone()), &Provenance::default())
                .map_err(err)?;
            write_session(&session, &a.out).map_err(err)?;
            written += 1;
        }
    }
    println!("{written} sessions written to {}", a.out.display());
    Ok(())
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

fn profile(a: ProfileArgs) -> CliResult {
    let profile = lookup_profile(&a.profile).map_err(err)?;
    let mut config = MatrixConfig::load(&a.workload).map_err(err)?;
    config.runtimes = vec![profile.name.clone()];
    if let Some(r) = a.reps {
        config.reps = r;
    }
    let cells = plan_matrix(&config).map_err(err)?;
    let out = absolute(&a.out);
    let data = out.join("data");
    let build = out.join("build");
    let sessions = out.join("sessions");
    for d in [&data, &build, &sessions] {
        fs::create_dir_all(d).map_err(|e| format!("{}: {e}", d.display()))?;
    }
    let native = profile.probes_module();
    for cell in cells {
        let mut spec = cell.spec.clone();
        let label = spec.label();
        spec.source_path = absolute(&a.cases.join(format!("{}.c", spec.kind)));
        spec.wasm_module = build.join(format!("{}.wasm", spec.kind));
        spec.native_binary = build.join(spec.kind.as_str());

        let data_name = match spec.kind {
            WorkloadKind::Fwrite => format!("output-{}.txt", spec.file_size_bytes),
            _ => format!("input-{}.txt", spec.file_size_bytes),
        };
        let data_path = data.join(&data_name);
        let input_sha256 = match spec.kind {
            WorkloadKind::Fwrite => None,
            _ => {
                let reuse = fs::metadata(&data_path).is_ok_and(|m| m.len() == spec.file_size_bytes);
                Some(if reuse {
                    sha256_file(&data_path).map_err(|e| format!("{}: {e}", data_path.display()))?
                } else {
                    generate_input(&data_path, spec.file_size_bytes, cell.record_width).map_err(err)?
                })
            }
        };

        let (backend, compile_commands) = match config.backend {
            BackendKind::Replay => {
                let root = config.replay_dir.clone().ok_or("replay backend needs replay_dir")?;
                (Backend::Replay(root.join(&profile.name).join(&label)), Vec::new())
            }
            BackendKind::Live => {
                let target = if native { Target::Native } else { Target::Wasm };
                let (artifact, compile_cmd) = compile_case(&spec, target, &config.toolchains).map_err(err)?;
                let binary = if native {
                    artifact.clone()
                } else {
                    a.binary.clone().unwrap_or_else(|| profile.binary_path.clone())
                };
                let args = case_args(&spec, &data_name, cell.record_width);
                let command =
                    profile.render_command(&binary.to_string_lossy(), &artifact.to_string_lossy(), &args);
                let mode = if a.accumulate || config.accumulate {
                    CollectMode::Accumulate
                } else {
                    CollectMode::PerEvent
                };
                let live = LiveBackend {
                    options: CollectorOptions {
                        mode,
                        workdir: Some(data.clone()),
                        ..Default::default()
                    },
                    binary,
                    command,
                    timeout: Duration::from_secs(config.timeout_s.unwrap_or(3600)),
                    log_dir: Some(sessions.join(&label).join("logs")),
                };
                (Backend::Live(live), vec![compile_cmd])
            }
        };
        let provenance = Provenance {
            compile_commands,
            input_sha256,
        };
        let session = run_cell(&profile, &spec, config.reps, &backend, &provenance).map_err(err)?;
        finish_session(&session, &sessions)?;
    }
    println!("sessions written to {}", sessions.display());
    Ok(())
}

fn finish_session(session: &SessionResult, dir: &Path) -> CliResult {
    let path = write_session(session, dir).map_err(err)?;
    let manifest = path
        .to_string_lossy()
        .trim_end_matches(SESSION_SUFFIX)
        .to_string()
        + ".manifest.json";
    let text = serde_json::to_string_pretty(&session.manifest).map_err(err)?;
    fs::write(&manifest, text + "\n").map_err(|e| format!("{manifest}: {e}"))?;
    println!(
        "{} {}: mean {:.3} ms over {} reps",
        session.runtime,
        session.workload.label(),
        session.mean_total_ns / 1e6,
        session.repetitions.len()
    );
    Ok(())
}
