//! Persistence formats and report emitters.
//!
//! Event logs are line-oriented: a `# format: ewapa/1` header, optional
//! `# key: value` metadata comments, then one JSON object per event with keys
//! `ts`, `pid`, `tid`, `comm`, `probe`, `class`, `kind`, `space` and an
//! optional `size`, always written in that order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{Analysis, AuxiliaryTable};
use crate::model::{AnomalyFinding, EventClass, EventKind, SessionResult, Space, TraceEvent};

pub const FORMAT_HEADER: &str = "# format: ewapa/1";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: unknown event kind {value:?}")]
    UnknownKind {
        path: PathBuf,
        line: usize,
        value: String,
    },
    #[error("{path}:{line}: unknown event class {value:?}")]
    UnknownClass {
        path: PathBuf,
        line: usize,
        value: String,
    },
    #[error("{path}: cannot write: {source}")]
    PathNotWritable {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn not_writable(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::PathNotWritable {
        path: path.to_path_buf(),
        source,
    }
}

/// A recorded stream plus the metadata comments that accompany it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    pub meta: BTreeMap<String, String>,
    pub events: Vec<TraceEvent>,
}

impl EventLog {
    pub fn meta_u64(&self, key: &str) -> Option<u64> {
        self.meta.get(key).and_then(|v| v.parse().ok())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogLine {
    ts: u64,
    pid: u32,
    tid: u32,
    comm: String,
    probe: String,
    class: String,
    kind: String,
    space: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    size: Option<u64>,
}

pub fn format_event(e: &TraceEvent) -> String {
    let line = LogLine {
        ts: e.ts_ns,
        pid: e.pid,
        tid: e.tid,
        comm: e.comm.clone(),
        probe: e.probe_id.clone(),
        class: e.class.as_str().to_string(),
        kind: e.kind.as_str().to_string(),
        space: e.space.as_str().to_string(),
        size: e.size_bytes,
    };
    serde_json::to_string(&line).expect("log lines always serialize")
}

pub fn write_event_log(log: &EventLog, path: &Path) -> Result<(), ReportError> {
    let file = fs::File::create(path).map_err(not_writable(path))?;
    let mut w = BufWriter::new(file);
    write_event_log_to(log, &mut w).map_err(not_writable(path))?;
    w.flush().map_err(not_writable(path))
}

pub fn write_event_log_to(log: &EventLog, w: &mut impl Write) -> io::Result<()> {
    writeln!(w, "{FORMAT_HEADER}")?;
    for (k, v) in &log.meta {
        writeln!(w, "# {k}: {v}")?;
    }
    for e in &log.events {
        writeln!(w, "{}", format_event(e))?;
    }
    Ok(())
}

pub fn parse_event_line(text: &str, path: &Path, line: usize) -> Result<TraceEvent, ReportError> {
    let parse_err = |message: String| ReportError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let raw: LogLine = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    if raw.ts == 0 {
        return Err(parse_err("timestamp must be positive".into()));
    }
    let class = raw.class.parse::<EventClass>().map_err(|value| ReportError::UnknownClass {
        path: path.to_path_buf(),
        line,
        value,
    })?;
    let kind = raw.kind.parse::<EventKind>().map_err(|value| ReportError::UnknownKind {
        path: path.to_path_buf(),
        line,
        value,
    })?;
    let space = raw
        .space
        .parse::<Space>()
        .map_err(|v| parse_err(format!("unknown space {v:?}")))?;
    Ok(TraceEvent {
        ts_ns: raw.ts,
        pid: raw.pid,
        tid: raw.tid,
        comm: raw.comm,
        probe_id: raw.probe,
        class,
        kind,
        space,
        size_bytes: raw.size,
    })
}

pub fn read_event_log(path: &Path) -> Result<EventLog, ReportError> {
    let file = fs::File::open(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut log = EventLog::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once(':') {
                let k = k.trim();
                if k != "format" && !k.is_empty() && !k.contains(' ') {
                    log.meta.insert(k.to_string(), v.trim().to_string());
                }
            }
            continue;
        }
        log.events.push(parse_event_line(trimmed, path, i + 1)?);
    }
    Ok(log)
}

pub const CSV_HEADER: &str = "runtime,workload,file_size_bytes,class,space,probe,count,total_ns,avg_ns,rep";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn avg_field(count: u64, total: u64) -> String {
    if count == 0 {
        String::new()
    } else {
        // integer half-up rounding; float formatting rounds ties to even
        ((u128::from(total) * 2 + u128::from(count)) / (u128::from(count) * 2)).to_string()
    }
}

fn sorted_sessions(results: &[SessionResult]) -> Vec<&SessionResult> {
    let mut v: Vec<&SessionResult> = results.iter().collect();
    v.sort_by(|a, b| {
        (&a.runtime, a.workload.kind, a.workload.file_size_bytes)
            .cmp(&(&b.runtime, b.workload.kind, b.workload.file_size_bytes))
    });
    v
}

/// Renders the metrics CSV. Rows are ordered by runtime, workload, size,
/// class, space and probe; per-repetition rows come first, then `mean` and
/// `stddev` aggregates whose count and total are rounded to integers.
pub fn metrics_csv(results: &[SessionResult]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for s in sorted_sessions(results) {
        let mut probes: BTreeMap<(EventClass, Space, String), Vec<(u64, u64)>> = BTreeMap::new();
        for rep in &s.repetitions {
            for m in rep.metrics.values() {
                probes.entry((m.class, m.space, m.probe_id.clone())).or_default();
            }
        }
        for rep in &s.repetitions {
            for ((_, _, probe), samples) in probes.iter_mut() {
                let sample = rep
                    .metrics
                    .get(probe)
                    .map_or((0, 0), |m| (m.count, m.total_ns));
                samples.push(sample);
            }
        }
        let prefix = format!(
            "{},{},{}",
            csv_field(&s.runtime),
            s.workload.kind,
            s.workload.file_size_bytes
        );
        let mut row = |class: EventClass, space: Space, probe: &str, count: u64, total: u64, rep: &str| {
            let _ = writeln!(
                out,
                "{prefix},{class},{},{},{count},{total},{},{rep}",
                space.as_str(),
                csv_field(probe),
                avg_field(count, total)
            );
        };
        for (i, _) in s.repetitions.iter().enumerate() {
            for ((class, space, probe), samples) in &probes {
                let (count, total) = samples[i];
                row(*class, *space, probe, count, total, &i.to_string());
            }
        }
        for ((class, space, probe), samples) in &probes {
            let counts: Vec<f64> = samples.iter().map(|s| s.0 as f64).collect();
            let totals: Vec<f64> = samples.iter().map(|s| s.1 as f64).collect();
            let (cm, cs) = crate::model::mean_stddev(&counts);
            let (tm, ts) = crate::model::mean_stddev(&totals);
            row(*class, *space, probe, cm.round() as u64, tm.round() as u64, "mean");
            row(
                *class,
                *space,
                probe,
                cs.unwrap_or(0.0).round() as u64,
                ts.unwrap_or(0.0).round() as u64,
                "stddev",
            );
        }
    }
    out
}

pub fn emit_metrics_csv(results: &[SessionResult], path: &Path) -> Result<(), ReportError> {
    fs::write(path, metrics_csv(results)).map_err(not_writable(path))
}

pub fn findings_jsonl(findings: &[AnomalyFinding]) -> String {
    findings
        .iter()
        .map(|f| serde_json::to_string(f).expect("findings always serialize") + "\n")
        .collect()
}

pub fn emit_findings(findings: &[AnomalyFinding], path: &Path) -> Result<(), ReportError> {
    fs::write(path, findings_jsonl(findings)).map_err(not_writable(path))
}

pub fn read_findings(path: &Path) -> Result<Vec<AnomalyFinding>, ReportError> {
    let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ReportError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn pct(v: f64) -> String {
    format!("{:.1}", (v * 100.0).clamp(0.0, 100.0))
}

fn secs(ns: f64) -> String {
    format!("{:.6}", ns / 1e9)
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em;color:#222}\
h2{border-bottom:1px solid #ccc}\
table{border-collapse:collapse;margin:.5em 0 1.5em}\
td,th{border:1px solid #ccc;padding:2px 8px;text-align:right}\
th:first-child,td:first-child{text-align:left}\
.bar{position:relative;width:420px;height:18px;background:#ddd;display:inline-block;vertical-align:middle}\
.wasi{position:absolute;left:0;top:0;height:18px;background:#3b7dd8}\
.sys{position:absolute;left:0;top:12px;height:6px;background:#d8743b}\
.hbar{height:14px;background:#5a9;display:inline-block;vertical-align:middle}\
.none{color:#888;font-style:italic}\
.extreme{background:#fdd}";

fn html_proportions(out: &mut String, analysis: &Analysis) {
    out.push_str("<h2>Time proportions</h2>\n");
    out.push_str("<p>Blue: WASI share of total time. Orange strip: syscall share. Grey: time outside WASI.</p>\n");
    if analysis.proportions.is_empty() {
        out.push_str("<p class=\"none\">no data</p>\n");
        return;
    }
    for (cell, runtimes) in &analysis.proportions {
        let classes: Vec<EventClass> = EventClass::IO
            .into_iter()
            .filter(|c| runtimes.values().any(|m| m.contains_key(c)))
            .collect();
        for class in classes {
            let _ = writeln!(out, "<h3>{} &middot; {class}</h3>\n<table>", esc(cell));
            out.push_str("<tr><th>runtime</th><th>share</th><th>WASI %</th><th>syscall %</th><th>other %</th></tr>\n");
            for (rt, m) in runtimes {
                let Some(p) = m.get(&class) else { continue };
                let _ = writeln!(
                    out,
                    "<tr><td>{}</td><td><span class=\"bar\"><span class=\"wasi\" style=\"width:{}%\"></span>\
                     <span class=\"sys\" style=\"width:{}%\"></span></span></td><td>{:.1}{}</td><td>{:.1}</td><td>{:.1}</td></tr>",
                    esc(rt),
                    pct(p.wasi_share),
                    pct(p.syscall_share),
                    p.wasi_share * 100.0,
                    if p.over_unity { " (over unity)" } else { "" },
                    p.syscall_share * 100.0,
                    p.other_share * 100.0
                );
            }
            out.push_str("</table>\n");
        }
    }
}

fn html_startups(out: &mut String, analysis: &Analysis) {
    out.push_str("<h2>Startup time</h2>\n");
    if analysis.startups.is_empty() {
        out.push_str("<p class=\"none\">no data</p>\n");
        return;
    }
    for (cell, runtimes) in &analysis.startups {
        let max = runtimes.values().copied().fold(0.0, f64::max);
        let _ = writeln!(out, "<h3>{}</h3>\n<table>", esc(cell));
        out.push_str("<tr><th>runtime</th><th>startup (s)</th><th></th></tr>\n");
        for (rt, ns) in runtimes {
            let width = if max > 0.0 { 400.0 * ns / max } else { 0.0 };
            let _ = writeln!(
                out,
                "<tr><td>{}</td><td>{}</td><td style=\"text-align:left\"><span class=\"hbar\" style=\"width:{width:.1}px\"></span></td></tr>",
                esc(rt),
                secs(*ns)
            );
        }
        out.push_str("</table>\n");
    }
}

fn html_trends(out: &mut String, analysis: &Analysis) {
    out.push_str("<h2>Growth trends</h2>\n");
    if analysis.trends.is_empty() {
        out.push_str("<p class=\"none\">no data (a trend needs two or more file sizes)</p>\n");
        return;
    }
    out.push_str("<table>\n<tr><th>series</th><th>points (bytes: s)</th><th>slope ratios</th><th>superlinear</th></tr>\n");
    for (name, (points, trend)) in &analysis.trends {
        let pts: Vec<String> = points.iter().map(|(s, t)| format!("{s}: {}", secs(*t))).collect();
        let ratios: Vec<String> = trend
            .slope_ratios
            .iter()
            .map(|r| r.map_or("n/a".to_string(), |r| format!("{r:.3}")))
            .collect();
        let _ = writeln!(
            out,
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}{}</td></tr>",
            esc(name),
            esc(&pts.join("; ")),
            ratios.join(", "),
            if trend.superlinear { "yes" } else { "no" },
            if trend.non_monotonic { " (non-monotonic)" } else { "" }
        );
    }
    out.push_str("</table>\n");
}

fn html_auxiliary(out: &mut String, table: &AuxiliaryTable) {
    out.push_str("<h2>Auxiliary call WASI time</h2>\n");
    if table.is_empty() {
        out.push_str("<p class=\"none\">no data</p>\n");
        return;
    }
    for (class, cells) in table {
        let _ = writeln!(out, "<h3>{class}</h3>\n<table>");
        out.push_str("<tr><th>runtime</th><th>WASI time (s)</th><th>ratio to fastest</th></tr>\n");
        for c in cells {
            let _ = writeln!(
                out,
                "<tr{}><td>{}</td><td>{:.5}</td><td>{}</td></tr>",
                if c.extreme { " class=\"extreme\"" } else { "" },
                esc(&c.runtime),
                c.value,
                c.ratio_to_min.map_or("n/a".to_string(), |r| format!("{r:.2}"))
            );
        }
        out.push_str("</table>\n");
    }
}

fn html_findings(out: &mut String, findings: &[AnomalyFinding]) {
    out.push_str("<h2>Findings</h2>\n");
    if findings.is_empty() {
        out.push_str("<p class=\"none\">no findings</p>\n");
        return;
    }
    out.push_str("<table>\n<tr><th>kind</th><th>subject</th><th>threshold</th><th>message</th></tr>\n");
    for f in findings {
        let _ = writeln!(
            out,
            "<tr><td>{}</td><td>{}</td><td>{}</td><td style=\"text-align:left\">{}</td></tr>",
            f.kind,
            esc(&f.subject),
            f.threshold,
            esc(&f.message)
        );
    }
    out.push_str("</table>\n");
}

fn html_sessions(out: &mut String, results: &[SessionResult]) {
    out.push_str("<h2>Sessions</h2>\n");
    if results.is_empty() {
        out.push_str("<p class=\"none\">no data</p>\n");
        return;
    }
    out.push_str("<table>\n<tr><th>runtime</th><th>workload</th><th>bytes</th><th>reps</th><th>mean total (s)</th><th>stddev (s)</th></tr>\n");
    for s in sorted_sessions(results) {
        let _ = writeln!(
            out,
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
            esc(&s.runtime),
            s.workload.kind,
            s.workload.file_size_bytes,
            s.repetitions.len(),
            secs(s.mean_total_ns),
            if s.stddev_undefined { "n/a".to_string() } else { secs(s.stddev_total_ns) }
        );
    }
    out.push_str("</table>\n");
}

/// Single self-contained page; no scripts, no external resources.
pub fn html_report(results: &[SessionResult], analysis: &Analysis) -> String {
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
    out.push_str("<title>WASI I/O profile report</title>\n");
    let _ = writeln!(out, "<style>{STYLE}</style>\n</head>\n<body>");
    out.push_str("<h1>WASI I/O profile report</h1>\n");
    html_sessions(&mut out, results);
    html_proportions(&mut out, analysis);
    html_startups(&mut out, analysis);
    html_trends(&mut out, analysis);
    html_auxiliary(&mut out, &analysis.auxiliary);
    html_findings(&mut out, &analysis.findings);
    out.push_str("</body>\n</html>\n");
    out
}

pub fn emit_html_report(results: &[SessionResult], analysis: &Analysis, path: &Path) -> Result<(), ReportError> {
    fs::write(path, html_report(results, analysis)).map_err(not_writable(path))
}

pub const SESSION_SUFFIX: &str = ".session.json";

pub fn session_file_name(s: &SessionResult) -> String {
    format!("{}__{}{SESSION_SUFFIX}", s.runtime, s.workload.label())
}

pub fn write_session(s: &SessionResult, dir: &Path) -> Result<PathBuf, ReportError> {
    fs::create_dir_all(dir).map_err(not_writable(dir))?;
    let path = dir.join(session_file_name(s));
    let text = serde_json::to_string_pretty(s).expect("sessions always serialize");
    fs::write(&path, text + "\n").map_err(not_writable(&path))?;
    Ok(path)
}

/// Loads every `*.session.json` in `dir`, sorted by file name.
pub fn read_sessions(dir: &Path) -> Result<Vec<SessionResult>, ReportError> {
    let io_err = |source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(SESSION_SUFFIX))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|source| ReportError::Io {
                path: p.clone(),
                source,
            })?;
            serde_json::from_str(&text).map_err(|e| ReportError::Parse {
                path: p.clone(),
                line: e.line(),
                message: e.to_string(),
            })
        })
        .collect()
}
