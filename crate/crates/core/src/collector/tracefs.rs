//! Kernel tracing filesystem access: dynamic probe definitions, event
//! scoping, and parsing of `trace_pipe` text output.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;

use crate::model::EventKind;

use super::CollectorError;

pub const DEFAULT_ROOTS: [&str; 2] = ["/sys/kernel/tracing", "/sys/kernel/debug/tracing"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tracefs {
    pub root: PathBuf,
}

impl Tracefs {
    pub fn at(root: impl Into<PathBuf>) -> Self {
        Tracefs { root: root.into() }
    }

    /// The first mounted tracing filesystem.
    pub fn locate() -> Option<Self> {
        DEFAULT_ROOTS
            .iter()
            .map(Path::new)
            .find(|p| p.join("uprobe_events").exists())
            .map(Tracefs::at)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, rel: &str, text: &str) -> Result<(), CollectorError> {
        write_file(&self.path(rel), text, false)
    }

    pub fn append(&self, rel: &str, text: &str) -> Result<(), CollectorError> {
        write_file(&self.path(rel), text, true)
    }

    pub fn read(&self, rel: &str) -> Result<String, CollectorError> {
        let p = self.path(rel);
        fs::read_to_string(&p).map_err(|e| io_error(&p, e))
    }

    /// Sum of ring-buffer overruns over all CPUs; 0 when not exposed.
    pub fn overruns(&self) -> u64 {
        let Ok(dir) = fs::read_dir(self.path("per_cpu")) else { return 0 };
        dir.filter_map(|e| e.ok())
            .filter_map(|e| fs::read_to_string(e.path().join("stats")).ok())
            .map(|s| parse_overrun(&s))
            .sum()
    }
}

pub fn io_error(path: &Path, e: io::Error) -> CollectorError {
    match e.raw_os_error() {
        Some(libc::EACCES) | Some(libc::EPERM) => CollectorError::PermissionDenied(path.to_path_buf()),
        _ => CollectorError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    }
}

fn write_file(path: &Path, text: &str, append: bool) -> Result<(), CollectorError> {
    let mut f = OpenOptions::new()
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| io_error(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_error(path, e))
}

pub fn parse_overrun(stats: &str) -> u64 {
    stats
        .lines()
        .find_map(|l| l.strip_prefix("overrun:"))
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// One parsed `trace_pipe` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLine {
    pub comm: String,
    pub tid: u32,
    /// Present when the `record-tgid` option is on.
    pub tgid: Option<u32>,
    pub cpu: u32,
    pub ts_ns: u64,
    pub event: String,
    pub args: String,
}

impl TraceLine {
    /// `ret=` fetch argument, if the event carried one.
    pub fn retval(&self) -> Option<i64> {
        let v = self.args.split_whitespace().find_map(|a| a.strip_prefix("ret="))?;
        match v.strip_prefix("0x") {
            Some(hex) => u64::from_str_radix(hex, 16).ok().map(|u| u as i64),
            None => v.parse().ok(),
        }
    }
}

fn line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^\s*(?P<comm>.*?)-(?P<tid>\d+)\s+(?:\(\s*(?P<tgid>\d+|-+)\)\s+)?\[(?P<cpu>\d+)\]\s+(?:[^\s\d]\S*\s+)?(?P<secs>\d+)\.(?P<frac>\d+):\s+(?P<event>[\w.]+):\s?(?P<args>.*)$",
        )
        .expect("valid pattern")
    })
}

/// Parses the default `trace_pipe` line format. Comment lines and lines
/// of other shapes yield `None`.
pub fn parse_trace_line(line: &str) -> Option<TraceLine> {
    if line.trim_start().starts_with('#') {
        return None;
    }
    let c = line_re().captures(line)?;
    let frac = &c["frac"];
    // scale the fraction to nanoseconds whatever its printed precision
    let frac_ns: u64 = if frac.len() >= 9 {
        frac[..9].parse().ok()?
    } else {
        frac.parse::<u64>().ok()? * 10u64.pow(9 - frac.len() as u32)
    };
    let secs: u64 = c["secs"].parse().ok()?;
    Some(TraceLine {
        comm: c["comm"].trim().to_string(),
        tid: c["tid"].parse().ok()?,
        tgid: c.name("tgid").and_then(|m| m.as_str().parse().ok()),
        cpu: c["cpu"].parse().ok()?,
        ts_ns: secs.checked_mul(1_000_000_000)?.checked_add(frac_ns)?,
        event: c["event"].to_string(),
        args: c["args"].to_string(),
    })
}

/// Event names are `p<index>_e` for entries and `p<index>_x` for exits.
pub fn event_name(index: u32, kind: EventKind) -> String {
    match kind {
        EventKind::Entry => format!("p{index}_e"),
        EventKind::Exit => format!("p{index}_x"),
    }
}

pub fn parse_event_name(name: &str) -> Option<(u32, EventKind)> {
    let rest = name.strip_prefix('p')?;
    let (idx, kind) = rest.rsplit_once('_')?;
    let kind = match kind {
        "e" => EventKind::Entry,
        "x" => EventKind::Exit,
        _ => return None,
    };
    Some((idx.parse().ok()?, kind))
}

/// Names of kernel functions, from a `/proc/kallsyms`-format listing.
pub fn read_kallsyms(path: &Path) -> Option<std::collections::HashSet<String>> {
    let text = fs::read_to_string(path).ok()?;
    let set: std::collections::HashSet<String> = text
        .lines()
        .filter_map(|l| l.split_whitespace().nth(2))
        .map(str::to_string)
        .collect();
    (!set.is_empty()).then_some(set)
}
