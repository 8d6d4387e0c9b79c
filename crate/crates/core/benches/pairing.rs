use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use wasiprof::pipeline::{pair_intervals, pair_intervals_sequential};
use wasiprof::{EventClass, EventKind, Space, TraceEvent};

fn stream(threads: u32, pairs_per_thread: u64) -> Vec<TraceEvent> {
    let probes = ["fd_read", "fd_write", "__x64_sys_read"];
    let mut out = Vec::with_capacity((threads as u64 * pairs_per_thread * 2) as usize);
    for tid in 0..threads {
        for i in 0..pairs_per_thread {
            let probe = probes[(i % 3) as usize];
            let t0 = i * 100 + u64::from(tid);
            for (kind, ts) in [(EventKind::Entry, t0 + 1), (EventKind::Exit, t0 + 1 + i % 50)] {
                out.push(TraceEvent {
                    ts_ns: ts,
                    pid: 1,
                    tid,
                    comm: "bench".into(),
                    probe_id: probe.into(),
                    class: EventClass::Read,
                    kind,
                    space: if i % 3 == 2 { Space::Kernel } else { Space::User },
                    size_bytes: None,
                });
            }
        }
    }
    out
}

fn pairing(c: &mut Criterion) {
    let mut g = c.benchmark_group("pair_intervals");
    for threads in [1u32, 8, 32] {
        let s = stream(threads, 200_000 / u64::from(threads));
        g.throughput(Throughput::Elements(s.len() as u64));
        g.bench_with_input(BenchmarkId::new("parallel", threads), &s, |b, s| {
            b.iter(|| pair_intervals(black_box(s)))
        });
        g.bench_with_input(BenchmarkId::new("sequential", threads), &s, |b, s| {
            b.iter(|| pair_intervals_sequential(black_box(s)))
        });
    }
    g.finish();
}

criterion_group!(benches, pairing);
criterion_main!(benches);
