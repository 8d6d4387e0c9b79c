//! Trend, proportion and auxiliary-call analysis plus the anomaly detectors.
//!
//! Every detector consumes plain counts or times, so live sessions and
//! replayed logs are analyzed identically.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AnomalyFinding, AnomalyKind, EventClass, SessionResult, Space, WorkloadKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("session total time is zero")]
    ZeroTotal,
    #[error("a trend needs at least two points")]
    TooFewPoints,
    #[error("trend sizes must be strictly increasing")]
    NonIncreasingSizes,
    #[error("WASI call count is zero")]
    ZeroWasiCount,
    #[error("call counts must be positive")]
    ZeroCount,
    #[error("startup comparison needs at least two runtimes")]
    InsufficientRuntimes,
    #[error("startup time of {0} is not positive")]
    NonPositiveStartup(String),
    #[error("no runtimes to compare against native")]
    EmptyRuntimeSet,
    #[error("time of {0} is not positive")]
    NonPositiveTime(String),
    #[error("chunk size is zero")]
    ZeroChunk,
}

/// Detector thresholds; every finding records the one that fired.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Slope ratio above which growth counts as superlinear.
    pub growth_ratio: f64,
    /// Allowed distance of syscall/WASI from 2.
    pub doubling_tol: f64,
    /// Distance within which a ratio snaps to an integer.
    pub snap: f64,
    /// Startup / fastest startup above which a runtime is an outlier.
    pub startup_factor: f64,
    /// Native-vs-wasm buffering ratio factor signalling a mismatch.
    pub buffer_mismatch: f64,
    /// Ratio-to-minimum flagged as extreme in auxiliary comparisons.
    pub extreme_ratio: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            growth_ratio: 1.25,
            doubling_tol: 0.05,
            snap: 0.25,
            startup_factor: 10.0,
            buffer_mismatch: 2.0,
            extreme_ratio: 1000.0,
        }
    }
}

/// Mean per-repetition totals of one class in one session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassTotals {
    pub wasi_ns: f64,
    pub wasi_count: f64,
    pub syscall_ns: f64,
    pub syscall_count: f64,
}

pub fn class_totals(result: &SessionResult) -> BTreeMap<EventClass, ClassTotals> {
    let mut out: BTreeMap<EventClass, ClassTotals> = BTreeMap::new();
    let reps = result.repetitions.len().max(1) as f64;
    for rep in &result.repetitions {
        for m in rep.metrics.values() {
            let t = out.entry(m.class).or_default();
            match m.space {
                Space::User => {
                    t.wasi_ns += m.total_ns as f64 / reps;
                    t.wasi_count += m.count as f64 / reps;
                }
                Space::Kernel => {
                    t.syscall_ns += m.total_ns as f64 / reps;
                    t.syscall_count += m.count as f64 / reps;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub wasi_share: f64,
    pub syscall_share: f64,
    pub other_share: f64,
    /// WASI time exceeded the wall total (possible when worker threads overlap).
    pub over_unity: bool,
}

/// Shares of total time per class. `syscall_share` is reported next to the
/// WASI share, never subtracted from it.
pub fn proportion_breakdown(
    result: &SessionResult,
) -> Result<BTreeMap<EventClass, Proportion>, AnalysisError> {
    if result.mean_total_ns <= 0.0 {
        return Err(AnalysisError::ZeroTotal);
    }
    Ok(class_totals(result)
        .into_iter()
        .map(|(class, t)| (class, proportion(t.wasi_ns, t.syscall_ns, result.mean_total_ns)))
        .collect())
}

pub fn proportion(wasi_ns: f64, syscall_ns: f64, total_ns: f64) -> Proportion {
    let wasi_share = wasi_ns / total_ns;
    Proportion {
        wasi_share,
        syscall_share: syscall_ns / total_ns,
        other_share: (1.0 - wasi_share).max(0.0),
        over_unity: wasi_share > 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub slopes: Vec<f64>,
    /// `slopes[i + 1] / slopes[i]`, `None` where the earlier slope is not positive.
    pub slope_ratios: Vec<Option<f64>>,
    pub superlinear: bool,
    pub non_monotonic: bool,
}

/// Marginal time per byte between consecutive sizes, and whether the
/// marginal cost grows faster than `theta` anywhere.
pub fn growth_trend(series: &[(u64, f64)], theta: f64) -> Result<Trend, AnalysisError> {
    if series.len() < 2 {
        return Err(AnalysisError::TooFewPoints);
    }
    if series.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(AnalysisError::NonIncreasingSizes);
    }
    let slopes: Vec<f64> = series
        .windows(2)
        .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0) as f64)
        .collect();
    let mut non_monotonic = slopes.iter().any(|s| *s <= 0.0);
    let slope_ratios: Vec<Option<f64>> = slopes
        .windows(2)
        .map(|w| {
            if w[0] > 0.0 {
                Some(w[1] / w[0])
            } else {
                non_monotonic = true;
                None
            }
        })
        .collect();
    let superlinear = slope_ratios.iter().flatten().any(|r| *r > theta);
    Ok(Trend {
        slopes,
        slope_ratios,
        superlinear,
        non_monotonic,
    })
}

pub fn detect_syscall_doubling(
    subject: &str,
    wasi_count: f64,
    syscall_count: f64,
    tol: f64,
) -> Result<Option<AnomalyFinding>, AnalysisError> {
    if wasi_count <= 0.0 {
        return Err(AnalysisError::ZeroWasiCount);
    }
    let ratio = syscall_count / wasi_count;
    if (ratio - 2.0).abs() > tol {
        return Ok(None);
    }
    Ok(Some(AnomalyFinding {
        kind: AnomalyKind::SyscallDoubling,
        subject: subject.to_string(),
        threshold: tol,
        evidence: BTreeMap::from([
            ("ratio".to_string(), ratio),
            ("wasi_count".to_string(), wasi_count),
            ("syscall_count".to_string(), syscall_count),
        ]),
        message: format!(
            "{subject}: {syscall_count} syscalls for {wasi_count} WASI calls (ratio {ratio:.3}); \
             each WASI call is split into two syscalls"
        ),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferRatio {
    /// Library calls per WASI call.
    pub r1: f64,
    /// WASI calls per syscall.
    pub r2: f64,
    /// The three terms of `library : WASI : syscall` after snapping.
    pub terms: [f64; 3],
    pub presentation: String,
    /// Library calls per syscall in the native control, when supplied.
    pub native_ratio: Option<f64>,
    pub finding: Option<AnomalyFinding>,
}

fn snap(value: f64, within: f64) -> (f64, bool) {
    let nearest = value.round();
    if (value - nearest).abs() <= within {
        (nearest, true)
    } else {
        (value, false)
    }
}

fn format_term(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Library : WASI : syscall call ratio, and whether it reveals user-space
/// buffering ahead of WASI or a buffering mechanism unlike the native one.
pub fn estimate_buffer_ratio(
    subject: &str,
    libc_count: u64,
    wasi_count: u64,
    syscall_count: u64,
    native_syscall_count: Option<u64>,
    thresholds: &Thresholds,
) -> Result<BufferRatio, AnalysisError> {
    if wasi_count == 0 || syscall_count == 0 || native_syscall_count == Some(0) {
        return Err(AnalysisError::ZeroCount);
    }
    let r1 = libc_count as f64 / wasi_count as f64;
    let r2 = wasi_count as f64 / syscall_count as f64;
    let (t1, r1_snapped) = snap(r1, thresholds.snap);
    let (t3, _) = snap(1.0 / r2, thresholds.snap);
    let terms = [t1, 1.0, t3];
    let presentation = terms.map(format_term).join(":");

    let native_ratio = native_syscall_count.map(|n| libc_count as f64 / n as f64);
    let buffered = r1_snapped && t1 > 1.0;
    let mismatch = native_ratio.is_some_and(|n| {
        let f = thresholds.buffer_mismatch;
        r1 > 0.0 && (n / r1 > f || r1 / n > f)
    });

    let finding = (buffered || mismatch).then(|| {
        let mut evidence = BTreeMap::from([
            ("r1".to_string(), r1),
            ("r2".to_string(), r2),
            ("libc_count".to_string(), libc_count as f64),
            ("wasi_count".to_string(), wasi_count as f64),
            ("syscall_count".to_string(), syscall_count as f64),
            ("buffered".to_string(), if buffered { 1.0 } else { 0.0 }),
            ("mechanism_mismatch".to_string(), if mismatch { 1.0 } else { 0.0 }),
        ]);
        if let Some(n) = native_ratio {
            evidence.insert("native_ratio".to_string(), n);
            evidence.insert("native_over_wasm".to_string(), n / r1);
        }
        let mut message = format!("{subject}: library:WASI:syscall = {presentation} (raw r1 {r1:.2})");
        if let Some(n) = native_ratio.filter(|_| mismatch) {
            message.push_str(&format!(
                "; native flushes every {n:.2} library calls, the runtime every {r1:.2}"
            ));
        }
        AnomalyFinding {
            kind: AnomalyKind::BufferRatioDivergence,
            subject: subject.to_string(),
            threshold: if mismatch { thresholds.buffer_mismatch } else { thresholds.snap },
            evidence,
            message,
        }
    });

    Ok(BufferRatio {
        r1,
        r2,
        terms,
        presentation,
        native_ratio,
        finding,
    })
}

pub fn detect_startup_outlier(
    startups: &BTreeMap<String, f64>,
    factor: f64,
) -> Result<Vec<AnomalyFinding>, AnalysisError> {
    if startups.len() < 2 {
        return Err(AnalysisError::InsufficientRuntimes);
    }
    if let Some((rt, _)) = startups.iter().find(|(_, v)| **v <= 0.0) {
        return Err(AnalysisError::NonPositiveStartup(rt.clone()));
    }
    let (min_rt, min) = startups
        .iter()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, v)| (k.clone(), *v))
        .expect("at least two runtimes");
    Ok(startups
        .iter()
        .filter_map(|(rt, &ns)| {
            let ratio = ns / min;
            (ratio > factor).then(|| AnomalyFinding {
                kind: AnomalyKind::StartupOutlier,
                subject: rt.clone(),
                threshold: factor,
                evidence: BTreeMap::from([
                    ("ratio".to_string(), ratio),
                    ("startup_ns".to_string(), ns),
                    ("min_ns".to_string(), min),
                ]),
                message: format!("{rt}: startup {ns:.0} ns is {ratio:.1}x the fastest ({min_rt})"),
            })
        })
        .collect())
}

pub fn detect_native_inversion(
    subject: &str,
    native_ns: f64,
    runtimes: &BTreeMap<String, f64>,
) -> Result<Option<AnomalyFinding>, AnalysisError> {
    if runtimes.is_empty() {
        return Err(AnalysisError::EmptyRuntimeSet);
    }
    if native_ns <= 0.0 {
        return Err(AnalysisError::NonPositiveTime("native".into()));
    }
    if let Some((rt, _)) = runtimes.iter().find(|(_, v)| **v <= 0.0) {
        return Err(AnalysisError::NonPositiveTime(rt.clone()));
    }
    let max = runtimes.values().copied().fold(f64::MIN, f64::max);
    if native_ns <= max {
        return Ok(None);
    }
    let mut evidence: BTreeMap<String, f64> = runtimes
        .iter()
        .map(|(rt, v)| (format!("ratio.{rt}"), native_ns / v))
        .collect();
    evidence.insert("native_ns".to_string(), native_ns);
    Ok(Some(AnomalyFinding {
        kind: AnomalyKind::NativeInversion,
        subject: subject.to_string(),
        threshold: 1.0,
        evidence,
        message: format!(
            "{subject}: native time {native_ns:.0} ns exceeds every runtime (max {max:.0} ns)"
        ),
    }))
}

/// Library calls for a whole-file loop: one per chunk plus the read that sees EOF.
pub fn expected_call_count(file_size_bytes: u64, chunk_bytes: u64) -> Result<u64, AnalysisError> {
    if chunk_bytes == 0 {
        return Err(AnalysisError::ZeroChunk);
    }
    Ok(file_size_bytes.div_ceil(chunk_bytes) + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryCell {
    pub runtime: String,
    pub value: f64,
    /// `value / column minimum`; `None` when the minimum is zero.
    pub ratio_to_min: Option<f64>,
    pub extreme: bool,
}

pub type AuxiliaryTable = BTreeMap<EventClass, Vec<AuxiliaryCell>>;

/// Per-class WASI times of each runtime next to their ratio to the fastest.
pub fn compare_auxiliary(
    results: &BTreeMap<String, BTreeMap<EventClass, f64>>,
    extreme_ratio: f64,
) -> AuxiliaryTable {
    let mut columns: BTreeMap<EventClass, Vec<(String, f64)>> = BTreeMap::new();
    for (rt, classes) in results {
        for (class, v) in classes {
            columns.entry(*class).or_default().push((rt.clone(), *v));
        }
    }
    columns
        .into_iter()
        .map(|(class, cells)| {
            let min = cells.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
            let cells = cells
                .into_iter()
                .map(|(runtime, value)| {
                    let ratio_to_min = (min > 0.0).then(|| value / min);
                    AuxiliaryCell {
                        runtime,
                        value,
                        ratio_to_min,
                        extreme: ratio_to_min.is_some_and(|r| r > extreme_ratio),
                    }
                })
                .collect();
            (class, cells)
        })
        .collect()
}

pub const NATIVE: &str = "native";

/// Everything the report needs, computed from a set of sessions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub findings: Vec<AnomalyFinding>,
    /// (kind, size) -> runtime -> class -> shares.
    pub proportions: BTreeMap<String, BTreeMap<String, BTreeMap<EventClass, Proportion>>>,
    /// (kind, size) -> runtime -> mean startup ns.
    pub startups: BTreeMap<String, BTreeMap<String, f64>>,
    /// "runtime/kind/class/series" -> trend over file sizes.
    pub trends: BTreeMap<String, (Vec<(u64, f64)>, Trend)>,
    /// (kind, size) -> runtime -> buffering presentation.
    pub buffer_ratios: BTreeMap<String, BTreeMap<String, String>>,
    pub auxiliary: AuxiliaryTable,
}

fn cell_key(kind: WorkloadKind, size: u64) -> String {
    format!("{kind}-{size}")
}

fn workload_class(kind: WorkloadKind) -> Option<EventClass> {
    match kind {
        WorkloadKind::Fread => Some(EventClass::Read),
        WorkloadKind::Fwrite => Some(EventClass::Write),
        WorkloadKind::Fseek | WorkloadKind::OpenClose => None,
    }
}

/// Runs every detector that the available sessions support.
///
/// Findings come out ordered by detector, then cell, then runtime.
pub fn analyze_sessions(sessions: &[SessionResult], t: &Thresholds) -> Analysis {
    let mut sessions: Vec<&SessionResult> = sessions.iter().collect();
    sessions.sort_by(|a, b| {
        (a.workload.kind, a.workload.file_size_bytes, &a.runtime)
            .cmp(&(b.workload.kind, b.workload.file_size_bytes, &b.runtime))
    });
    let totals: Vec<BTreeMap<EventClass, ClassTotals>> =
        sessions.iter().map(|s| class_totals(s)).collect();

    let mut out = Analysis::default();
    let mut doubling = Vec::new();
    let mut buffer = Vec::new();
    let mut inversion = Vec::new();
    let mut startup = Vec::new();
    let mut growth = Vec::new();

    // cells
    let mut cells: BTreeMap<(WorkloadKind, u64), Vec<usize>> = BTreeMap::new();
    for (i, s) in sessions.iter().enumerate() {
        cells
            .entry((s.workload.kind, s.workload.file_size_bytes))
            .or_default()
            .push(i);
    }

    for (&(kind, size), members) in &cells {
        let key = cell_key(kind, size);
        for &i in members {
            let s = sessions[i];
            if let Ok(p) = proportion_breakdown(s) {
                out.proportions
                    .entry(key.clone())
                    .or_default()
                    .insert(s.runtime.clone(), p);
            }
            if let Some(st) = s.mean_startup_ns() {
                out.startups
                    .entry(key.clone())
                    .or_default()
                    .insert(s.runtime.clone(), st);
            }
        }

        let Some(class) = workload_class(kind) else { continue };
        let native = members
            .iter()
            .copied()
            .find(|&i| sessions[i].runtime == NATIVE)
            .map(|i| totals[i].get(&class).copied().unwrap_or_default());

        for &i in members {
            let s = sessions[i];
            let Some(ct) = totals[i].get(&class) else { continue };
            let subject = format!("{}/{key}/{class}", s.runtime);
            if s.runtime != NATIVE && ct.wasi_count > 0.0 {
                if let Ok(Some(f)) =
                    detect_syscall_doubling(&subject, ct.wasi_count, ct.syscall_count, t.doubling_tol)
                {
                    doubling.push(f);
                }
            }
            if kind == WorkloadKind::Fwrite && s.runtime != NATIVE {
                if let Some(n) = native {
                    if let Ok(br) = estimate_buffer_ratio(
                        &subject,
                        n.wasi_count.round() as u64,
                        ct.wasi_count.round() as u64,
                        ct.syscall_count.round() as u64,
                        Some(n.syscall_count.round() as u64).filter(|c| *c > 0),
                        t,
                    ) {
                        out.buffer_ratios
                            .entry(key.clone())
                            .or_default()
                            .insert(s.runtime.clone(), br.presentation.clone());
                        buffer.extend(br.finding);
                    }
                }
            }
        }

        if let Some(n) = native.filter(|n| n.wasi_ns > 0.0) {
            let runtimes: BTreeMap<String, f64> = members
                .iter()
                .filter(|&&i| sessions[i].runtime != NATIVE)
                .filter_map(|&i| {
                    let w = totals[i].get(&class)?.wasi_ns;
                    (w > 0.0).then(|| (sessions[i].runtime.clone(), w))
                })
                .collect();
            if let Ok(Some(f)) = detect_native_inversion(&format!("{key}/{class}"), n.wasi_ns, &runtimes) {
                inversion.push(f);
            }
        }
    }

    for (key, per_rt) in &out.startups {
        let wasm: BTreeMap<String, f64> = per_rt
            .iter()
            .filter(|(rt, v)| rt.as_str() != NATIVE && **v > 0.0)
            .map(|(rt, v)| (rt.clone(), *v))
            .collect();
        if let Ok(fs) = detect_startup_outlier(&wasm, t.startup_factor) {
            startup.extend(fs.into_iter().map(|mut f| {
                let subject = format!("{}/{key}", f.subject);
                f.message = f.message.replacen(&f.subject, &subject, 1);
                f.subject = subject;
                f
            }));
        }
    }

    // growth over sizes for each runtime and main workload
    let mut series: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    for (i, s) in sessions.iter().enumerate() {
        let Some(class) = workload_class(s.workload.kind) else { continue };
        let base = format!("{}/{}/{class}", s.runtime, s.workload.kind);
        let ct = totals[i].get(&class).copied().unwrap_or_default();
        let size = s.workload.file_size_bytes;
        series.entry(format!("{base}/wasi")).or_default().push((size, ct.wasi_ns));
        series.entry(format!("{base}/syscall")).or_default().push((size, ct.syscall_ns));
        series.entry(format!("{base}/total")).or_default().push((size, s.mean_total_ns));
    }
    for (name, points) in series {
        let Ok(trend) = growth_trend(&points, t.growth_ratio) else { continue };
        if trend.superlinear {
            let worst = trend.slope_ratios.iter().flatten().copied().fold(f64::MIN, f64::max);
            growth.push(AnomalyFinding {
                kind: AnomalyKind::SuperlinearGrowth,
                subject: name.clone(),
                threshold: t.growth_ratio,
                evidence: BTreeMap::from([
                    ("max_slope_ratio".to_string(), worst),
                    ("points".to_string(), points.len() as f64),
                ]),
                message: format!("{name}: marginal time per byte grows {worst:.3}x between sizes"),
            });
        }
        out.trends.insert(name, (points, trend));
    }

    // auxiliary calls: total WASI seconds per runtime and class
    let mut aux: BTreeMap<String, BTreeMap<EventClass, f64>> = BTreeMap::new();
    for (i, s) in sessions.iter().enumerate() {
        let classes: &[EventClass] = match s.workload.kind {
            WorkloadKind::Fseek => &[EventClass::Seek],
            WorkloadKind::OpenClose => &[EventClass::Open, EventClass::Close],
            _ => continue,
        };
        for class in classes {
            if let Some(ct) = totals[i].get(class) {
                aux.entry(s.runtime.clone())
                    .or_default()
                    .insert(*class, ct.wasi_ns / 1e9);
            }
        }
    }
    out.auxiliary = compare_auxiliary(&aux, t.extreme_ratio);

    out.findings = [doubling, buffer, inversion, startup, growth].concat();
    out
}
