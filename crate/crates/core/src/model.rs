//! Domain types shared by every stage of the profiler: runtime profiles,
//! trace events, interval metrics, workloads, session results and findings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of the kernel's task command-name field, excluding the terminator.
pub const COMM_LEN: usize = 15;

/// Kind of I/O operation a probe observes.
///
/// `Init` and `Load` mark runtime startup milestones and never carry a
/// syscall hook.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum EventClass {
    Read,
    Write,
    Seek,
    Open,
    Close,
    Init,
    Load,
}

impl EventClass {
    pub const ALL: [EventClass; 7] = [
        EventClass::Read,
        EventClass::Write,
        EventClass::Seek,
        EventClass::Open,
        EventClass::Close,
        EventClass::Init,
        EventClass::Load,
    ];

    /// Classes that correspond to an I/O call (everything except startup markers).
    pub const IO: [EventClass; 5] = [
        EventClass::Read,
        EventClass::Write,
        EventClass::Seek,
        EventClass::Open,
        EventClass::Close,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventClass::Read => "read",
            EventClass::Write => "write",
            EventClass::Seek => "seek",
            EventClass::Open => "open",
            EventClass::Close => "close",
            EventClass::Init => "init",
            EventClass::Load => "load",
        }
    }

    pub fn is_startup(self) -> bool {
        matches!(self, EventClass::Init | EventClass::Load)
    }
}

impl fmt::Display for EventClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Entry,
    Exit,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Entry => "entry",
            EventKind::Exit => "exit",
        }
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "entry" => Ok(EventKind::Entry),
            "exit" => Ok(EventKind::Exit),
            other => Err(other.to_string()),
        }
    }
}

/// Where a probe fires: a user-space symbol or a kernel syscall entry point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    User,
    Kernel,
}

impl Space {
    pub fn as_str(self) -> &'static str {
        match self {
            Space::User => "user",
            Space::Kernel => "kernel",
        }
    }
}

impl FromStr for Space {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "user" => Ok(Space::User),
            "kernel" => Ok(Space::Kernel),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WasiHook {
    pub class: EventClass,
    pub symbol_pattern: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyscallHook {
    pub class: EventClass,
    pub kernel_symbol: String,
}

/// Probe configuration for one runtime.
///
/// `command_template` understands `{binary}`, `{module}` and `{args}`.
/// A `binary_path` of `{module}` means the workload artifact itself is the
/// probed binary (the native control group).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeProfile {
    pub name: String,
    pub binary_path: PathBuf,
    pub command_template: String,
    pub comm_filter: String,
    pub init_symbol: String,
    pub load_symbol: String,
    pub wasi_hooks: Vec<WasiHook>,
    pub syscall_hooks: Vec<SyscallHook>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProfileError {
    #[error("profile {profile}: more than one {hook} hook for class {class}")]
    DuplicateClass {
        profile: String,
        hook: &'static str,
        class: EventClass,
    },
    #[error("profile {profile}: empty symbol in {field}")]
    EmptySymbol { profile: String, field: String },
    #[error("profile {profile}: command template {template:?} lacks {{module}}")]
    MissingPlaceholder { profile: String, template: String },
    #[error("profile {profile}: class {class} cannot carry a {hook} hook")]
    StartupClassHook {
        profile: String,
        hook: &'static str,
        class: EventClass,
    },
    #[error("profile {profile}: comm filter {filter:?} exceeds {COMM_LEN} bytes")]
    CommTooLong { profile: String, filter: String },
}

impl RuntimeProfile {
    /// Whether the probed binary is the workload artifact rather than a runtime.
    pub fn probes_module(&self) -> bool {
        self.binary_path.as_os_str() == "{module}"
    }

    pub fn wasi_hook(&self, class: EventClass) -> Option<&WasiHook> {
        self.wasi_hooks.iter().find(|h| h.class == class)
    }

    pub fn syscall_hook(&self, class: EventClass) -> Option<&SyscallHook> {
        self.syscall_hooks.iter().find(|h| h.class == class)
    }

    /// Expands the command template into an argv.
    pub fn render_command(&self, binary: &str, module: &str, args: &[String]) -> Vec<String> {
        let mut argv = Vec::new();
        for token in self.command_template.split_whitespace() {
            if token == "{args}" {
                argv.extend(args.iter().cloned());
            } else {
                argv.push(
                    token
                        .replace("{binary}", binary)
                        .replace("{module}", module)
                        .replace("{args}", &args.join(" ")),
                );
            }
        }
        argv
    }
}

pub fn validate_profile(profile: RuntimeProfile) -> Result<RuntimeProfile, ProfileError> {
    let name = || profile.name.clone();
    let mut seen = Vec::new();
    for (i, hook) in profile.wasi_hooks.iter().enumerate() {
        if hook.class.is_startup() {
            return Err(ProfileError::StartupClassHook {
                profile: name(),
                hook: "wasi",
                class: hook.class,
            });
        }
        if seen.contains(&hook.class) {
            return Err(ProfileError::DuplicateClass {
                profile: name(),
                hook: "wasi",
                class: hook.class,
            });
        }
        seen.push(hook.class);
        if hook.symbol_pattern.trim().is_empty() {
            return Err(ProfileError::EmptySymbol {
                profile: name(),
                field: format!("wasi_hooks[{i}].symbol_pattern"),
            });
        }
    }
    seen.clear();
    for (i, hook) in profile.syscall_hooks.iter().enumerate() {
        if hook.class.is_startup() {
            return Err(ProfileError::StartupClassHook {
                profile: name(),
                hook: "syscall",
                class: hook.class,
            });
        }
        if seen.contains(&hook.class) {
            return Err(ProfileError::DuplicateClass {
                profile: name(),
                hook: "syscall",
                class: hook.class,
            });
        }
        seen.push(hook.class);
        if hook.kernel_symbol.trim().is_empty() {
            return Err(ProfileError::EmptySymbol {
                profile: name(),
                field: format!("syscall_hooks[{i}].kernel_symbol"),
            });
        }
    }
    for (field, value) in [
        ("init_symbol", &profile.init_symbol),
        ("load_symbol", &profile.load_symbol),
    ] {
        if value.trim().is_empty() {
            return Err(ProfileError::EmptySymbol {
                profile: name(),
                field: field.to_string(),
            });
        }
    }
    if !profile.command_template.contains("{module}") {
        return Err(ProfileError::MissingPlaceholder {
            profile: name(),
            template: profile.command_template.clone(),
        });
    }
    if profile.comm_filter.len() > COMM_LEN {
        return Err(ProfileError::CommTooLong {
            profile: name(),
            filter: profile.comm_filter.clone(),
        });
    }
    Ok(profile)
}

/// One timestamped probe hit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub ts_ns: u64,
    pub pid: u32,
    pub tid: u32,
    pub comm: String,
    pub probe_id: String,
    pub class: EventClass,
    pub kind: EventKind,
    pub space: Space,
    pub size_bytes: Option<u64>,
}

/// Per-probe aggregate of matched entry/exit intervals.
///
/// An empty metric has every numeric field at zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalMetric {
    pub probe_id: String,
    pub class: EventClass,
    pub space: Space,
    pub count: u64,
    pub total_ns: u64,
    pub min_ns: u64,
    pub max_ns: u64,
}

impl IntervalMetric {
    pub fn empty(probe_id: impl Into<String>, class: EventClass, space: Space) -> Self {
        IntervalMetric {
            probe_id: probe_id.into(),
            class,
            space,
            count: 0,
            total_ns: 0,
            min_ns: 0,
            max_ns: 0,
        }
    }

    pub fn record(&mut self, duration_ns: u64) {
        if self.count == 0 {
            self.min_ns = duration_ns;
            self.max_ns = duration_ns;
        } else {
            self.min_ns = self.min_ns.min(duration_ns);
            self.max_ns = self.max_ns.max(duration_ns);
        }
        self.count += 1;
        self.total_ns += duration_ns;
    }

    /// Combines two partial aggregates of the same probe.
    pub fn merge(&mut self, other: &IntervalMetric) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            self.count = other.count;
            self.total_ns = other.total_ns;
            self.min_ns = other.min_ns;
            self.max_ns = other.max_ns;
            return;
        }
        self.count += other.count;
        self.total_ns += other.total_ns;
        self.min_ns = self.min_ns.min(other.min_ns);
        self.max_ns = self.max_ns.max(other.max_ns);
    }

    /// `total_ns / count`, or 0 for an empty metric.
    pub fn average_ns(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total_ns as f64 / self.count as f64
        }
    }
}

pub type MetricMap = BTreeMap<String, IntervalMetric>;

/// Merges `other` into `into`, probe by probe.
pub fn merge_metric_maps(into: &mut MetricMap, other: &MetricMap) {
    for (probe, metric) in other {
        into.entry(probe.clone())
            .and_modify(|m| m.merge(metric))
            .or_insert_with(|| metric.clone());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadKind {
    Fread,
    Fwrite,
    Fseek,
    #[serde(rename = "openclose")]
    OpenClose,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 4] = [
        WorkloadKind::Fread,
        WorkloadKind::Fwrite,
        WorkloadKind::Fseek,
        WorkloadKind::OpenClose,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WorkloadKind::Fread => "fread",
            WorkloadKind::Fwrite => "fwrite",
            WorkloadKind::Fseek => "fseek",
            WorkloadKind::OpenClose => "openclose",
        }
    }

    pub fn is_auxiliary(self) -> bool {
        matches!(self, WorkloadKind::Fseek | WorkloadKind::OpenClose)
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WorkloadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WorkloadKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

pub const DEFAULT_LOOP_COUNT: u32 = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub file_size_bytes: u64,
    pub chunk_bytes: u64,
    pub loop_count: u32,
    pub source_path: PathBuf,
    pub wasm_module: PathBuf,
    pub native_binary: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkloadError {
    #[error("file size must be positive")]
    ZeroFileSize,
    #[error("chunk size must be positive")]
    ZeroChunk,
    #[error("{0} workloads need a positive loop count")]
    ZeroLoopCount(WorkloadKind),
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.file_size_bytes == 0 {
            return Err(WorkloadError::ZeroFileSize);
        }
        if self.chunk_bytes == 0 {
            return Err(WorkloadError::ZeroChunk);
        }
        if self.kind.is_auxiliary() && self.loop_count == 0 {
            return Err(WorkloadError::ZeroLoopCount(self.kind));
        }
        Ok(())
    }

    /// Short stable label, e.g. `fread-107374182400`.
    pub fn label(&self) -> String {
        format!("{}-{}", self.kind, self.file_size_bytes)
    }
}

/// Provenance of a session: everything needed to rerun it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub profile: String,
    pub compile_commands: Vec<String>,
    pub runtime_command: Vec<String>,
    pub input_sha256: Option<String>,
    pub logs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRecord {
    pub total_ns: u64,
    pub startup_ns: Option<u64>,
    pub metrics: MetricMap,
    pub unmatched_entries: u64,
    pub orphan_exits: u64,
    #[serde(default)]
    pub clock_violations: u64,
    #[serde(default)]
    pub lost_events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub runtime: String,
    pub workload: WorkloadSpec,
    pub repetitions: Vec<RepetitionRecord>,
    pub mean_total_ns: f64,
    pub stddev_total_ns: f64,
    /// Set when fewer than two repetitions make the sample deviation undefined.
    pub stddev_undefined: bool,
    pub manifest: SessionManifest,
}

impl SessionResult {
    pub fn new(
        runtime: impl Into<String>,
        workload: WorkloadSpec,
        repetitions: Vec<RepetitionRecord>,
        manifest: SessionManifest,
    ) -> Self {
        let totals: Vec<f64> = repetitions.iter().map(|r| r.total_ns as f64).collect();
        let (mean, stddev) = mean_stddev(&totals);
        SessionResult {
            runtime: runtime.into(),
            workload,
            mean_total_ns: mean,
            stddev_total_ns: stddev.unwrap_or(0.0),
            stddev_undefined: stddev.is_none(),
            repetitions,
            manifest,
        }
    }

    /// Mean startup over the repetitions that observed one.
    pub fn mean_startup_ns(&self) -> Option<f64> {
        let values: Vec<f64> = self
            .repetitions
            .iter()
            .filter_map(|r| r.startup_ns.map(|v| v as f64))
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}

/// Arithmetic mean and sample (n-1) standard deviation; the deviation is
/// `None` for fewer than two values.
pub fn mean_stddev(values: &[f64]) -> (f64, Option<f64>) {
    if values.is_empty() {
        return (0.0, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    SyscallDoubling,
    SuperlinearGrowth,
    StartupOutlier,
    BufferRatioDivergence,
    NativeInversion,
}

impl AnomalyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::SyscallDoubling => "syscall_doubling",
            AnomalyKind::SuperlinearGrowth => "superlinear_growth",
            AnomalyKind::StartupOutlier => "startup_outlier",
            AnomalyKind::BufferRatioDivergence => "buffer_ratio_divergence",
            AnomalyKind::NativeInversion => "native_inversion",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyFinding {
    pub kind: AnomalyKind,
    pub subject: String,
    pub threshold: f64,
    pub evidence: BTreeMap<String, f64>,
    pub message: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn wasm3_like() -> RuntimeProfile {
        RuntimeProfile {
            name: "wasm3".into(),
            binary_path: "/usr/local/bin/wasm3".into(),
            command_template: "{binary} {module} {args}".into(),
            comm_filter: "wasm3".into(),
            init_symbol: "m3_NewEnv".into(),
            load_symbol: "repl_load".into(),
            wasi_hooks: vec![WasiHook {
                class: EventClass::Read,
                symbol_pattern: "m3_wasi_generic_fd_read".into(),
            }],
            syscall_hooks: vec![SyscallHook {
                class: EventClass::Read,
                kernel_symbol: "__x64_sys_readv".into(),
            }],
        }
    }

    #[test]
    fn well_formed_profile_is_accepted_unchanged() {
        let p = wasm3_like();
        assert_eq!(validate_profile(p.clone()).unwrap(), p);
    }

    #[test]
    fn duplicate_read_hook_is_rejected() {
        let mut p = wasm3_like();
        p.wasi_hooks.push(WasiHook {
            class: EventClass::Read,
            symbol_pattern: "other".into(),
        });
        assert!(matches!(
            validate_profile(p),
            Err(ProfileError::DuplicateClass { class: EventClass::Read, .. })
        ));
    }

    #[test]
    fn template_without_module_is_rejected() {
        let mut p = wasm3_like();
        p.command_template = "run mod.wasm".into();
        assert!(matches!(
            validate_profile(p),
            Err(ProfileError::MissingPlaceholder { .. })
        ));
    }

    #[test]
    fn empty_symbols_and_startup_hooks_are_rejected() {
        let mut p = wasm3_like();
        p.load_symbol = " ".into();
        assert!(matches!(
            validate_profile(p),
            Err(ProfileError::EmptySymbol { field, .. }) if field == "load_symbol"
        ));
        let mut p = wasm3_like();
        p.syscall_hooks[0].class = EventClass::Init;
        assert!(matches!(
            validate_profile(p),
            Err(ProfileError::StartupClassHook { .. })
        ));
        let mut p = wasm3_like();
        p.comm_filter = "a-very-long-command".into();
        assert!(matches!(validate_profile(p), Err(ProfileError::CommTooLong { .. })));
    }

    #[test]
    fn render_command_expands_placeholders() {
        let p = wasm3_like();
        let argv = p.render_command("wasm3", "case.wasm", &["in.txt".into(), "4096".into()]);
        assert_eq!(argv, ["wasm3", "case.wasm", "in.txt", "4096"]);
    }

    #[test]
    fn metric_record_and_average() {
        let mut m = IntervalMetric::empty("p", EventClass::Read, Space::User);
        assert_eq!(m.average_ns(), 0.0);
        m.record(150);
        m.record(50);
        assert_eq!((m.count, m.total_ns, m.min_ns, m.max_ns), (2, 200, 50, 150));
        assert_eq!(m.average_ns(), 100.0);
    }

    #[test]
    fn mean_and_sample_stddev() {
        let (mean, sd) = mean_stddev(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(mean, 5.0);
        // sum of squared deviations is 32, n - 1 = 7
        assert!((sd.unwrap() - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_stddev(&[3.0]), (3.0, None));
    }

    #[test]
    fn auxiliary_workloads_need_loops() {
        let spec = WorkloadSpec {
            kind: WorkloadKind::Fseek,
            file_size_bytes: 1,
            chunk_bytes: 1,
            loop_count: 0,
            source_path: "a.c".into(),
            wasm_module: "a.wasm".into(),
            native_binary: "a".into(),
        };
        assert_eq!(spec.validate(), Err(WorkloadError::ZeroLoopCount(WorkloadKind::Fseek)));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn durations() -> impl Strategy<Value = Vec<u64>> {
            prop::collection::vec(0u64..1_000_000, 0..60)
        }

        fn fold(ds: &[u64]) -> IntervalMetric {
            let mut m = IntervalMetric::empty("p", EventClass::Write, Space::Kernel);
            ds.iter().for_each(|d| m.record(*d));
            m
        }

        proptest! {
            #[test]
            fn merge_is_split_invariant(ds in durations(), a in 0usize..60, b in 0usize..60) {
                let (lo, hi) = (a.min(b).min(ds.len()), a.max(b).min(ds.len()));
                let whole = fold(&ds);
                let (x, y, z) = (fold(&ds[..lo]), fold(&ds[lo..hi]), fold(&ds[hi..]));
                // (x + y) + z
                let mut left = x.clone();
                left.merge(&y);
                left.merge(&z);
                // z + (y + x)
                let mut yx = y.clone();
                yx.merge(&x);
                let mut right = z.clone();
                right.merge(&yx);
                prop_assert_eq!(&left, &whole);
                prop_assert_eq!(&right, &whole);
            }

            #[test]
            fn metric_average_between_min_and_max(ds in prop::collection::vec(1u64..1_000_000, 1..60)) {
                let m = fold(&ds);
                prop_assert!(m.min_ns * m.count <= m.total_ns);
                prop_assert!(m.total_ns <= m.max_ns * m.count);
            }
        }
    }
}
