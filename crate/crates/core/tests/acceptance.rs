//! Acceptance checks, one line per criterion. Exits nonzero on any failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wasiprof::analysis::{
    detect_native_inversion, detect_startup_outlier, detect_syscall_doubling, estimate_buffer_ratio,
    expected_call_count, growth_trend, Thresholds,
};
use wasiprof::fixtures::concrete_symbol;
use wasiprof::pipeline::{compute_startup, pair_intervals, PipelineError};
use wasiprof::registry::builtin_profile;
use wasiprof::report::read_event_log;
use wasiprof::{AnomalyKind, EventClass, EventKind, IntervalMetric, MetricMap, Space, TraceEvent};

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn ev(kind: EventKind, tid: u32, probe: usize, ts: u64) -> TraceEvent {
    const CLASSES: [EventClass; 6] = [
        EventClass::Read,
        EventClass::Write,
        EventClass::Seek,
        EventClass::Open,
        EventClass::Close,
        EventClass::Read,
    ];
    TraceEvent {
        ts_ns: ts,
        pid: 100,
        tid,
        comm: "synthetic".into(),
        probe_id: format!("probe{probe}"),
        class: CLASSES[probe],
        kind,
        space: if probe % 2 == 0 { Space::User } else { Space::Kernel },
        size_bytes: None,
    }
}

/// Well-nested per thread: a random walk over open calls, at most `depth`
/// deep, with threads interleaved on a shared clock.
fn nested_stream(rng: &mut ChaCha8Rng, max_events: usize, depth: usize) -> Vec<TraceEvent> {
    let tids = rng.gen_range(1..=8u32);
    let probes = rng.gen_range(1..=6usize);
    let budget = rng.gen_range(2..=max_events) / 2 * 2;
    let mut open: Vec<Vec<usize>> = vec![Vec::new(); tids as usize];
    let mut ts = 0u64;
    let mut out = Vec::with_capacity(budget);
    while out.len() < budget {
        let t = rng.gen_range(0..tids) as usize;
        let remaining = budget - out.len();
        let pending: usize = open.iter().map(Vec::len).sum();
        ts += rng.gen_range(1..1000);
        let must_close = remaining <= pending;
        if !must_close && open[t].len() < depth && (open[t].is_empty() || rng.gen_bool(0.5)) {
            let p = rng.gen_range(0..probes);
            open[t].push(p);
            out.push(ev(EventKind::Entry, t as u32, p, ts));
        } else if let Some(p) = open[t].pop() {
            out.push(ev(EventKind::Exit, t as u32, p, ts));
        }
    }
    out
}

/// Brute force: each exit scans backward for the nearest earlier entry of
/// the same thread and probe that no later exit has claimed.
fn oracle(stream: &[TraceEvent]) -> MetricMap {
    let mut claimed = vec![false; stream.len()];
    let mut out = MetricMap::new();
    for (i, x) in stream.iter().enumerate() {
        if x.kind != EventKind::Exit {
            continue;
        }
        let hit = (0..i).rev().find(|&j| {
            let e = &stream[j];
            !claimed[j] && e.kind == EventKind::Entry && e.tid == x.tid && e.probe_id == x.probe_id
        });
        if let Some(j) = hit {
            claimed[j] = true;
            out.entry(x.probe_id.clone())
                .or_insert_with(|| IntervalMetric::empty(&x.probe_id, x.class, x.space))
                .record(x.ts_ns - stream[j].ts_ns);
        }
    }
    out
}

fn ac1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut events = 0;
    for i in 0..200 {
        let s = nested_stream(&mut rng, 10_000, 5);
        events += s.len();
        check(pair_intervals(&s).metrics == oracle(&s), format!("stream {i} differs from oracle"))?;
    }
    let took = start.elapsed();
    check(took < Duration::from_secs(10), format!("took {took:?}"))?;
    Ok(format!("200 streams, {events} events, exact, {:.2}s", took.as_secs_f64()))
}

fn ac2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut orphans = 0;
    for i in 0..200 {
        let mut s = nested_stream(&mut rng, 4000, 5);
        // orphan exits, and entries left open by deleting their exits
        for _ in 0..rng.gen_range(1..20) {
            let ts = rng.gen_range(0..s.last().map_or(1, |e| e.ts_ns + 1));
            let tid = rng.gen_range(0..8);
            s.push(ev(EventKind::Exit, tid, rng.gen_range(0..6), ts));
        }
        for _ in 0..rng.gen_range(0..10) {
            if let Some(k) = s.iter().position(|e| e.kind == EventKind::Exit && rng.gen_bool(0.1)) {
                s.remove(k);
            }
        }
        let d = pair_intervals(&s).diagnostics;
        orphans += d.orphan_exits;
        let lhs = d.matched_pairs * 2 + d.orphan_exits + d.unmatched_entries + d.clock_violations * 2;
        check(lhs == s.len() as u64 && d.events == s.len() as u64, format!("stream {i}: {d:?}"))?;
    }
    check(orphans > 0, "no orphans were produced")?;
    Ok(format!("200 streams conserved, {orphans} orphan exits"))
}

fn read_counts(log: &Path) -> Result<(u64, u64), String> {
    let log = read_event_log(log).map_err(|e| e.to_string())?;
    let io: Vec<TraceEvent> = log.events.into_iter().filter(|e| !e.class.is_startup()).collect();
    let m = pair_intervals(&io).metrics;
    let count = |sp: Space| {
        m.values()
            .filter(|x| x.class == EventClass::Read && x.space == sp)
            .map(|x| x.count)
            .sum()
    };
    Ok((count(Space::User), count(Space::Kernel)))
}

fn ac3() -> Outcome {
    let dir = repo_root().join("fixtures");
    let mut summary = Vec::new();
    for rt in ["wasm3", "wamr", "wasmtime", "wasmer"] {
        let (wasi, sys) = read_counts(&dir.join(rt).join("fread-107374182400").join("rep-00.log"))?;
        if rt == "wasm3" {
            check(wasi == 2621, format!("wasm3 WASI count {wasi}"))?;
        }
        let ratio = sys as f64 / wasi as f64;
        let found = detect_syscall_doubling(rt, wasi as f64, sys as f64, 0.05).map_err(|e| e.to_string())?;
        if rt == "wasmer" {
            check((wasi, sys) == (2621, 5243), format!("wasmer counts {wasi}/{sys}"))?;
            check((1.95..=2.05).contains(&ratio) && found.is_some(), format!("wasmer ratio {ratio}"))?;
        } else {
            check((0.95..=1.05).contains(&ratio) && found.is_none(), format!("{rt} ratio {ratio}"))?;
        }
        summary.push(format!("{rt} {ratio:.3}"));
    }
    Ok(summary.join(", "))
}

fn ac4() -> Outcome {
    let b = estimate_buffer_ratio(
        "wasmtime",
        1_750_000_077,
        101_797_388,
        101_797_388,
        Some(25_976_563),
        &Thresholds::default(),
    )
    .map_err(|e| e.to_string())?;
    let native = b.native_ratio.unwrap_or(f64::NAN);
    check(b.presentation == "17:1:1", format!("presentation {}", b.presentation))?;
    check((17.1..=17.3).contains(&b.r1), format!("r1 {}", b.r1))?;
    check((67.0..=67.8).contains(&native), format!("native ratio {native}"))?;
    let f = b.finding.ok_or("no finding")?;
    check(f.evidence.get("mechanism_mismatch") == Some(&1.0), "mechanism mismatch not flagged")?;
    Ok(format!("{} r1 {:.3} native {:.2}", b.presentation, b.r1, native))
}

fn ac5() -> Outcome {
    let k = 1000;
    let b = estimate_buffer_ratio("rt", 4 * k, k, k, None, &Thresholds::default()).map_err(|e| e.to_string())?;
    check(b.presentation == "4:1:1", format!("presentation {}", b.presentation))?;
    Ok(b.presentation)
}

fn ac6() -> Outcome {
    let n = expected_call_count(100 << 30, 4096).map_err(|e| e.to_string())?;
    check(n == 26_214_401, format!("{n}"))?;
    Ok(n.to_string())
}

fn ac7() -> Outcome {
    let profile = builtin_profile("wasmtime").map_err(|e| e.to_string())?;
    let mark = |pattern: &str, class, ts| TraceEvent {
        ts_ns: ts,
        pid: 7,
        tid: 7,
        comm: "wasmtime".into(),
        probe_id: concrete_symbol(pattern),
        class,
        kind: EventKind::Entry,
        space: Space::User,
        size_bytes: None,
    };
    let init = mark(&profile.init_symbol, EventClass::Init, 1000);
    let load = mark(&profile.load_symbol, EventClass::Load, 5000);
    let ns = compute_startup(&[init.clone(), load], &profile).map_err(|e| e.to_string())?;
    check(ns == 4000, format!("startup {ns}"))?;
    let missing = compute_startup(&[init], &profile);
    check(matches!(missing, Err(PipelineError::MissingLoad(_))), format!("{missing:?}"))?;
    Ok(format!("{ns} ns, missing load rejected"))
}

fn ac8() -> Outcome {
    let startups = BTreeMap::from([
        ("a".to_string(), 1e6),
        ("b".to_string(), 95e6),
        ("c".to_string(), 2000e6),
    ]);
    let f = detect_startup_outlier(&startups, 10.0).map_err(|e| e.to_string())?;
    let subjects: Vec<&str> = f.iter().map(|x| x.subject.as_str()).collect();
    check(subjects == ["b", "c"], format!("flagged {subjects:?}"))?;
    let ratio = f[1].evidence["ratio"];
    check((ratio - 2000.0).abs() <= 0.5, format!("ratio {ratio}"))?;
    Ok(format!("flagged {subjects:?}, ratio {ratio}"))
}

fn ac9() -> Outcome {
    let set = |v: [f64; 5]| -> BTreeMap<String, f64> {
        ["wasm3", "wamr", "wasmtime_preview2", "wasmer", "wasmtime"]
            .iter()
            .zip(v)
            .map(|(k, s)| (k.to_string(), s * 1e9))
            .collect()
    };
    let fwrite = detect_native_inversion("fwrite", 2701e9, &set([311.0, 290.0, 1026.0, 1775.0, 419.0]))
        .map_err(|e| e.to_string())?;
    check(fwrite.as_ref().map(|f| f.kind) == Some(AnomalyKind::NativeInversion), "fwrite did not fire")?;
    let fread = detect_native_inversion("fread", 178e9, &set([211.0, 249.0, 311.0, 683.0, 215.0]))
        .map_err(|e| e.to_string())?;
    check(fread.is_none(), "fread fired")?;
    Ok("fires for fwrite, silent for fread".into())
}

fn ac10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..100 {
        let a = rng.gen_range(0.0..100.0);
        let b = rng.gen_range(0.001..10.0);
        let mut x = 0u64;
        let series: Vec<(u64, f64)> = (0..rng.gen_range(3..8))
            .map(|_| {
                x += rng.gen_range(1..1 << 34);
                (x, a + b * x as f64 / (1u64 << 30) as f64)
            })
            .collect();
        let t = growth_trend(&series, 1.25).map_err(|e| e.to_string())?;
        check(!t.superlinear, format!("affine series {i} flagged: {series:?}"))?;
    }
    let g = 1u64 << 30;
    let t = growth_trend(&[(g, 2.0), (10 * g, 20.0), (100 * g, 280.0)], 1.25).map_err(|e| e.to_string())?;
    check(t.superlinear, "(2, 20, 280) not superlinear")?;
    Ok("100 affine series linear, (2, 20, 280) superlinear".into())
}

fn wasiprof(args: &[&str]) -> Result<(), String> {
    let argv = std::iter::once("wasiprof").chain(args.iter().copied());
    match wasiprof::cli::run(argv) {
        0 => Ok(()),
        code => Err(format!("{args:?} exited {code}")),
    }
}

fn replay_and_analyze(out: &Path) -> Result<Vec<Vec<u8>>, String> {
    let fixtures = repo_root().join("fixtures");
    let sessions = out.join("sessions");
    let p = |name: &str| out.join(name).to_string_lossy().into_owned();
    wasiprof(&["replay", "--log", &fixtures.to_string_lossy(), "--out", &sessions.to_string_lossy()])?;
    wasiprof(&[
        "analyze",
        "--sessions",
        &sessions.to_string_lossy(),
        "--csv",
        &p("metrics.csv"),
        "--findings",
        &p("findings.jsonl"),
        "--html",
        &p("report.html"),
    ])?;
    ["metrics.csv", "findings.jsonl", "report.html"]
        .iter()
        .map(|f| std::fs::read(out.join(f)).map_err(|e| format!("{f}: {e}")))
        .collect()
}

fn ac11() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = replay_and_analyze(a.path())?;
    let second = replay_and_analyze(b.path())?;
    check(first == second, "outputs differ between runs")?;
    let csv = String::from_utf8(first[0].clone()).map_err(|e| e.to_string())?;
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (count, total): (u64, u64) = (f[6].parse().map_err(|_| line)?, f[7].parse().map_err(|_| line)?);
        let want = if count == 0 {
            String::new()
        } else {
            ((total as f64 / count as f64).round() as u64).to_string()
        };
        check(f[8] == want, format!("avg mismatch: {line}"))?;
        rows += 1;
    }
    let findings = first[1].iter().filter(|&&c| c == b'\n').count();
    Ok(format!("identical across runs, {rows} CSV rows checked, {findings} findings"))
}

fn ac12() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let gen = |name: &str| -> Result<Vec<u8>, String> {
        let out = dir.path().join(name);
        wasiprof(&["gen-input", "--size", "1037", "--record-width", "61", "--out", &out.to_string_lossy()])?;
        std::fs::read(&out).map_err(|e| e.to_string())
    };
    let a = gen("a.txt")?;
    let b = gen("b.txt")?;
    check(a.len() == 1037, format!("{} bytes", a.len()))?;
    let records: Vec<&[u8]> = a.split_inclusive(|&c| c == b'\n').collect();
    check(
        records.len() == 17 && records.iter().all(|r| r.len() == 61 && r.ends_with(b"\n")),
        format!("{} records", records.len()),
    )?;
    check(a == b, "repeated output differs")?;
    Ok("1037 bytes, 17 records, deterministic".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("AC1 pairing oracle equivalence", ac1),
        ("AC2 pairing conservation", ac2),
        ("AC3 syscall doubling fixture", ac3),
        ("AC4 buffering ratio 17:1:1", ac4),
        ("AC5 buffering ratio 4:1:1", ac5),
        ("AC6 expected call count", ac6),
        ("AC7 startup computation", ac7),
        ("AC8 startup outlier", ac8),
        ("AC9 native inversion", ac9),
        ("AC10 trend detector", ac10),
        ("AC11 end-to-end replay", ac11),
        ("AC12 input generator", ac12),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("{} passed, {failed} failed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
