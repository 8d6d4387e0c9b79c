use std::path::{Path, PathBuf};
use std::process::Command;

use wasiprof::registry::{list_symbols, resolve_in_object, resolve_symbol, RegistryError};

const SOURCE: &str = r#"
#include <stdio.h>
__attribute__((noinline)) int host_fd_read(int x) { return x + 1; }
__attribute__((noinline)) int host_fd_read_vectored(int x) { return x * 3; }
__attribute__((noinline)) int alpha_close(int x) { return x - 1; }
__attribute__((noinline)) int beta_close(int x) { return x - 2; }
int main(int argc, char **argv) {
    (void)argv;
    printf("%d\n", host_fd_read(argc) + host_fd_read_vectored(argc) + alpha_close(argc) + beta_close(argc));
    return 0;
}
"#;

fn build(dir: &Path) -> Option<PathBuf> {
    let src = dir.join("probe_target.c");
    let bin = dir.join("probe_target");
    std::fs::write(&src, SOURCE).unwrap();
    let ok = Command::new("cc").arg("-O1").arg("-o").arg(&bin).arg(&src).status().ok()?.success();
    ok.then_some(bin)
}

fn nm_address(bin: &Path, name: &str) -> Option<u64> {
    let out = Command::new("nm").arg(bin).output().ok()?;
    String::from_utf8_lossy(&out.stdout).lines().find_map(|l| {
        let mut f = l.split_whitespace();
        let (addr, _kind, sym) = (f.next()?, f.next()?, f.next()?);
        (sym == name).then(|| u64::from_str_radix(addr, 16).ok()).flatten()
    })
}

#[test]
fn resolution_agrees_with_nm() {
    let dir = tempfile::tempdir().unwrap();
    let Some(bin) = build(dir.path()) else {
        eprintln!("no C compiler; skipped");
        return;
    };
    let table = list_symbols(&bin).unwrap();
    for name in ["host_fd_read", "host_fd_read_vectored", "alpha_close", "beta_close", "main"] {
        let want = nm_address(&bin, name).expect("nm lists the symbol");
        let got = resolve_symbol(&table, name).unwrap();
        assert_eq!((got.name.as_str(), got.address), (name, want));
    }
    // a suffix match outranks an interior one
    let r = resolve_in_object(&bin, "host...fd_read").unwrap();
    assert_eq!(r.name, "host_fd_read");
    assert_eq!(r.object, bin);
}

#[test]
fn equal_rank_matches_are_ambiguous() {
    let dir = tempfile::tempdir().unwrap();
    let Some(bin) = build(dir.path()) else { return };
    match resolve_in_object(&bin, "..._close") {
        Err(RegistryError::Ambiguous { candidates, .. }) => {
            assert_eq!(candidates.len(), 2);
            assert!(candidates[0].starts_with("alpha_close@") || candidates[1].starts_with("alpha_close@"));
        }
        other => panic!("expected ambiguity, got {other:?}"),
    }
    let o = Command::new(env!("CARGO_BIN_EXE_wasiprof"))
        .args(["symbols", "--binary", bin.to_str().unwrap(), "--pattern", "..._close"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("alpha_close") && err.contains("beta_close"), "{err}");
}

#[test]
fn libc_symbols_resolve_through_dependencies() {
    let dir = tempfile::tempdir().unwrap();
    let Some(bin) = build(dir.path()) else { return };
    let r = resolve_in_object(&bin, "printf").unwrap();
    assert_ne!(r.object, bin, "printf should come from a shared library");
}

#[test]
fn non_object_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("text");
    std::fs::write(&p, "hello").unwrap();
    assert!(matches!(list_symbols(&p), Err(RegistryError::NotAnObjectFile { .. })));
}
