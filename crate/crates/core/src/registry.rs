//! Built-in runtime profiles, profile files, and symbol lookup in ELF objects.
//!
//! Hook symbol patterns are matched against both the raw and the demangled
//! name of every defined function symbol. A pattern is a literal substring;
//! `...` inside a pattern elides an arbitrary gap, so
//! `wasi_common...fd_read` matches any name containing `wasi_common`
//! followed later by `fd_read`. Among candidates, an exact full-name match
//! wins over a name that ends with the pattern, which wins over an interior
//! match.
//!
//! The built-in profiles were authored against these runtime versions:
//! Wasm3 `772f8f46`, WAMR `52db362b`, Wasmtime 14.0.4, Wasmtime 18.0.0
//! (preview2 WASI), Wasmer 4.2.2. Versions are not checked; a failed
//! resolution is the signal that a binary has drifted.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use object::{Object, ObjectSegment, ObjectSymbol, SymbolKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    validate_profile, EventClass, ProfileError, RuntimeProfile, SyscallHook, WasiHook,
};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("{path}: not an object file ({reason})")]
    NotAnObjectFile { path: PathBuf, reason: String },
    #[error("{0}: no symbol tables present")]
    StrippedBinary(PathBuf),
    #[error("no symbol matches {0:?}")]
    NotFound(String),
    #[error("{pattern:?} is ambiguous: {}", .candidates.join(", "))]
    Ambiguous {
        pattern: String,
        candidates: Vec<String>,
    },
    #[error("empty symbol pattern")]
    EmptyPattern,
    #[error("unknown built-in profile {0:?}")]
    UnknownProfile(String),
    #[error("{path}: parse error{}{}: {message}",
        .line.map(|l| format!(" at line {l}")).unwrap_or_default(),
        .field.as_ref().map(|f| format!(" in field `{f}`")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        line: Option<usize>,
        field: Option<String>,
        message: String,
    },
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SymbolEntry {
    pub name: String,
    pub address: u64,
    pub is_dynamic: bool,
}

impl SymbolEntry {
    /// Demangled form, when the name carries a recognizable Rust/Itanium mangling.
    pub fn demangled(&self) -> Option<String> {
        demangle(&self.name)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SymbolTable {
    pub entries: Vec<SymbolEntry>,
}

fn demangle(name: &str) -> Option<String> {
    rustc_demangle::try_demangle(name)
        .ok()
        .map(|d| format!("{d:#}"))
        .filter(|d| d != name)
}

fn read_file(path: &Path) -> Result<Vec<u8>, RegistryError> {
    fs::read(path).map_err(|source| RegistryError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// All defined function symbols from the static and dynamic tables,
/// deduplicated by (name, address) and sorted by name.
pub fn list_symbols(binary: &Path) -> Result<SymbolTable, RegistryError> {
    let data = read_file(binary)?;
    let file = object::File::parse(&*data).map_err(|e| RegistryError::NotAnObjectFile {
        path: binary.to_path_buf(),
        reason: e.to_string(),
    })?;

    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    let mut any_table = false;
    let tables = [(false, file.symbols()), (true, file.dynamic_symbols())];
    for (is_dynamic, symbols) in tables {
        for sym in symbols {
            any_table = true;
            if sym.is_undefined() || sym.kind() != SymbolKind::Text {
                continue;
            }
            let Ok(name) = sym.name() else { continue };
            if name.is_empty() {
                continue;
            }
            // Relocatable objects legitimately place the first function at 0.
            if sym.address() == 0 && file.kind() != object::ObjectKind::Relocatable {
                continue;
            }
            if seen.insert((name.to_string(), sym.address())) {
                entries.push(SymbolEntry {
                    name: name.to_string(),
                    address: sym.address(),
                    is_dynamic,
                });
            }
        }
    }
    if !any_table {
        return Err(RegistryError::StrippedBinary(binary.to_path_buf()));
    }
    entries.sort();
    Ok(SymbolTable { entries })
}

/// Shared libraries named by the object's `DT_NEEDED` entries.
pub fn needed_libraries(binary: &Path) -> Result<Vec<String>, RegistryError> {
    let data = read_file(binary)?;
    let file = object::File::parse(&*data).map_err(|e| RegistryError::NotAnObjectFile {
        path: binary.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut libs = Vec::new();
    if let object::File::Elf64(elf) = &file {
        use object::read::elf::{Dyn, FileHeader};
        let endian = elf.endian();
        let header = elf.elf_header();
        let parsed = header.sections(endian, &*data).and_then(|sections| {
            let Some((dyns, link)) = sections.dynamic(endian, &*data)? else {
                return Ok(Vec::new());
            };
            let strings = sections.strings(endian, &*data, link)?;
            let mut out = Vec::new();
            for d in dyns {
                if d.d_tag(endian) == u64::from(object::elf::DT_NEEDED) {
                    let name = d.string(endian, strings)?;
                    out.push(String::from_utf8_lossy(name).into_owned());
                }
            }
            Ok(out)
        });
        libs = parsed.map_err(|e: object::Error| RegistryError::NotAnObjectFile {
            path: binary.to_path_buf(),
            reason: e.to_string(),
        })?;
    }
    Ok(libs)
}

const LIBRARY_DIRS: &[&str] = &[
    "/lib/x86_64-linux-gnu",
    "/usr/lib/x86_64-linux-gnu",
    "/lib64",
    "/usr/lib64",
    "/lib",
    "/usr/lib",
];

/// Locates a `DT_NEEDED` library name on the standard search path.
pub fn find_library(name: &str) -> Option<PathBuf> {
    LIBRARY_DIRS
        .iter()
        .map(|d| Path::new(d).join(name))
        .find(|p| p.is_file())
}

/// Converts a virtual address into the file offset a uprobe needs.
pub fn file_offset(binary: &Path, address: u64) -> Result<u64, RegistryError> {
    let data = read_file(binary)?;
    let file = object::File::parse(&*data).map_err(|e| RegistryError::NotAnObjectFile {
        path: binary.to_path_buf(),
        reason: e.to_string(),
    })?;
    for seg in file.segments() {
        let (start, size) = (seg.address(), seg.size());
        if address >= start && address < start + size {
            let (offset, _) = seg.file_range();
            return Ok(address - start + offset);
        }
    }
    // Relocatable objects have no segments; addresses are section-relative.
    Ok(address)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum MatchTier {
    Interior,
    Suffix,
    Exact,
}

fn segments_in_order(haystack: &str, segments: &[&str]) -> bool {
    let mut cursor = 0;
    for seg in segments {
        match haystack[cursor..].find(seg) {
            Some(found) => cursor += found + seg.len(),
            None => return false,
        }
    }
    true
}

fn match_tier(name: &str, pattern: &str) -> Option<MatchTier> {
    if name == pattern {
        return Some(MatchTier::Exact);
    }
    let segments: Vec<&str> = pattern.split("...").filter(|s| !s.is_empty()).collect();
    let (tail, head) = segments.split_last()?;
    if name.ends_with(tail) && segments_in_order(&name[..name.len() - tail.len()], head) {
        Some(MatchTier::Suffix)
    } else if segments_in_order(name, &segments) {
        Some(MatchTier::Interior)
    } else {
        None
    }
}

/// Whether `pattern` matches `name`, raw or demangled.
pub fn name_matches(name: &str, pattern: &str) -> bool {
    match_tier(name, pattern).is_some()
        || demangle(name).is_some_and(|d| match_tier(&d, pattern).is_some())
}

/// Finds the unique symbol matching `pattern`.
pub fn resolve_symbol<'a>(
    table: &'a SymbolTable,
    pattern: &str,
) -> Result<&'a SymbolEntry, RegistryError> {
    if pattern.is_empty() || pattern.split("...").all(str::is_empty) {
        return Err(RegistryError::EmptyPattern);
    }
    let mut best: Option<MatchTier> = None;
    let mut candidates: Vec<&SymbolEntry> = Vec::new();
    for entry in &table.entries {
        let demangled = entry.demangled();
        let tier = [Some(entry.name.as_str()), demangled.as_deref()]
            .into_iter()
            .flatten()
            .filter_map(|n| match_tier(n, pattern))
            .max();
        let Some(tier) = tier else { continue };
        match best {
            Some(b) if tier < b => {}
            Some(b) if tier == b => candidates.push(entry),
            _ => {
                best = Some(tier);
                candidates.clear();
                candidates.push(entry);
            }
        }
    }
    match candidates.as_slice() {
        [] => Err(RegistryError::NotFound(pattern.to_string())),
        [one] => Ok(one),
        many => Err(RegistryError::Ambiguous {
            pattern: pattern.to_string(),
            candidates: many
                .iter()
                .map(|e| format!("{}@{:#x}", e.name, e.address))
                .collect(),
        }),
    }
}

/// A symbol resolved to the object that defines it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedSymbol {
    pub object: PathBuf,
    pub name: String,
    pub address: u64,
}

/// Resolves `pattern` in `binary`, falling back to its shared-library
/// dependencies when the binary itself does not define it (e.g. `fread`
/// in a dynamically linked program).
pub fn resolve_in_object(binary: &Path, pattern: &str) -> Result<ResolvedSymbol, RegistryError> {
    let table = list_symbols(binary)?;
    match resolve_symbol(&table, pattern) {
        Ok(entry) => Ok(ResolvedSymbol {
            object: binary.to_path_buf(),
            name: entry.name.clone(),
            address: entry.address,
        }),
        Err(RegistryError::NotFound(_)) => {
            for lib in needed_libraries(binary)? {
                let Some(path) = find_library(&lib) else { continue };
                let Ok(table) = list_symbols(&path) else { continue };
                match resolve_symbol(&table, pattern) {
                    Ok(entry) => {
                        return Ok(ResolvedSymbol {
                            object: path,
                            name: entry.name.clone(),
                            address: entry.address,
                        })
                    }
                    Err(RegistryError::NotFound(_)) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(RegistryError::NotFound(pattern.to_string()))
        }
        Err(e) => Err(e),
    }
}

fn profile(
    name: &str,
    binary: &str,
    template: &str,
    comm: &str,
    init: &str,
    load: &str,
    wasi: [&str; 5],
    syscalls: [&str; 5],
) -> RuntimeProfile {
    RuntimeProfile {
        name: name.into(),
        binary_path: binary.into(),
        command_template: template.into(),
        comm_filter: comm.into(),
        init_symbol: init.into(),
        load_symbol: load.into(),
        wasi_hooks: EventClass::IO
            .into_iter()
            .zip(wasi)
            .map(|(class, p)| WasiHook {
                class,
                symbol_pattern: p.into(),
            })
            .collect(),
        syscall_hooks: EventClass::IO
            .into_iter()
            .zip(syscalls)
            .map(|(class, s)| SyscallHook {
                class,
                kernel_symbol: s.into(),
            })
            .collect(),
    }
}

/// The six shipped profiles: native control group plus five runtimes.
///
/// Hook order within each profile is read, write, seek, open, close.
pub fn builtin_profiles() -> Vec<RuntimeProfile> {
    vec![
        // An empty comm filter means "the launched executable's name".
        profile(
            "native",
            "{module}",
            "{module} {args}",
            "",
            "__libc_start_main",
            "main",
            ["fread", "fwrite", "fseek", "fopen", "fclose"],
            [
                "__x64_sys_read",
                "__x64_sys_write",
                "__x64_sys_lseek",
                "__x64_sys_openat",
                "__x64_sys_close",
            ],
        ),
        profile(
            "wasm3",
            "/usr/local/bin/wasm3",
            "{binary} {module} {args}",
            "wasm3",
            "m3_NewEnv",
            "repl_load",
            [
                "m3_wasi_generic_fd_read",
                "m3_wasi_generic_fd_write",
                "m3_wasi_generic_fd_seek",
                "m3_wasi_generic_path_open",
                "m3_wasi_generic_fd_close",
            ],
            [
                "__x64_sys_readv",
                "__x64_sys_writev",
                "__x64_sys_lseek",
                "__x64_sys_openat",
                "__x64_sys_close",
            ],
        ),
        profile(
            "wasmtime",
            "/usr/local/bin/wasmtime",
            "{binary} run --dir=. {module} {args}",
            "wasmtime",
            "RunCommand::execute",
            "RunCommand::load_module",
            [
                "wasi_common...fd_read",
                "wasi_common...fd_write",
                "wasi_common...fd_seek",
                "wasi_common...path_open",
                "wasi_common...fd_close",
            ],
            [
                "__x64_sys_readv",
                "__x64_sys_writev",
                "__x64_sys_lseek",
                "__x64_sys_openat",
                "__x64_sys_close",
            ],
        ),
        profile(
            "wasmtime_preview2",
            "/usr/local/bin/wasmtime",
            "{binary} run -S preview2=y --dir=. {module} {args}",
            "wasmtime",
            "RunCommand::execute",
            "RunCommand::load_module",
            [
                "wasmtime_wasi::preview2...fd_read",
                "wasmtime_wasi::preview2...fd_write",
                "wasmtime_wasi::preview2...fd_seek",
                "wasmtime_wasi::preview2...path_open",
                "wasmtime_wasi::preview2...fd_close",
            ],
            [
                "__x64_sys_readv",
                "__x64_sys_pwrite64",
                "__x64_sys_lseek",
                "__x64_sys_openat",
                "__x64_sys_close",
            ],
        ),
        profile(
            "wasmer",
            "/usr/local/bin/wasmer",
            "{binary} run --dir=. {module} -- {args}",
            "wasmer",
            "__libc_start_main",
            "wasmer::module::Module::imports",
            [
                "wasmer_wasix...fd_read",
                "wasmer_wasix...fd_write",
                "wasmer_wasix...fd_seek",
                "wasmer_wasix...path_open",
                "wasmer_wasix...fd_close",
            ],
            [
                "__x64_sys_read",
                "__x64_sys_write",
                "__x64_sys_lseek",
                "__x64_sys_openat",
                "__x64_sys_close",
            ],
        ),
        profile(
            "wamr",
            "/usr/local/bin/iwasm",
            "{binary} --dir=. {module} {args}",
            "iwasm",
            "wasm_runtime_full_init",
            "bh_read_file_to_buffer",
            [
                "wasi_fd_read",
                "wasi_fd_write",
                "wasi_fd_seek",
                "wasi_path_open",
                "wasi_fd_close",
            ],
            [
                "__x64_sys_pread64",
                "__x64_sys_writev",
                "__x64_sys_lseek",
                "__x64_sys_openat",
                "__x64_sys_close",
            ],
        ),
    ]
}

pub fn builtin_profile(name: &str) -> Result<RuntimeProfile, RegistryError> {
    builtin_profiles()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| RegistryError::UnknownProfile(name.to_string()))
}

/// A built-in name, or else a path to a profile file.
pub fn lookup_profile(name_or_path: &str) -> Result<RuntimeProfile, RegistryError> {
    let path = Path::new(name_or_path);
    if path.is_file() {
        load_profile(path)
    } else {
        builtin_profile(name_or_path)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    name: String,
    binary_path: PathBuf,
    command_template: String,
    comm_filter: String,
    init_symbol: String,
    load_symbol: String,
    wasi_hooks: Vec<WasiHook>,
    syscall_hooks: Vec<SyscallHook>,
}

impl From<ProfileFile> for RuntimeProfile {
    fn from(f: ProfileFile) -> Self {
        RuntimeProfile {
            name: f.name,
            binary_path: f.binary_path,
            command_template: f.command_template,
            comm_filter: f.comm_filter,
            init_symbol: f.init_symbol,
            load_symbol: f.load_symbol,
            wasi_hooks: f.wasi_hooks,
            syscall_hooks: f.syscall_hooks,
        }
    }
}

pub fn profile_to_toml(profile: &RuntimeProfile) -> String {
    let file = ProfileFile {
        name: profile.name.clone(),
        binary_path: profile.binary_path.clone(),
        command_template: profile.command_template.clone(),
        comm_filter: profile.comm_filter.clone(),
        init_symbol: profile.init_symbol.clone(),
        load_symbol: profile.load_symbol.clone(),
        wasi_hooks: profile.wasi_hooks.clone(),
        syscall_hooks: profile.syscall_hooks.clone(),
    };
    toml::to_string(&file).expect("profile fields are always representable")
}

pub fn parse_profile(text: &str, origin: &Path) -> Result<RuntimeProfile, RegistryError> {
    let file: ProfileFile = toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|span| text[..span.start.min(text.len())].matches('\n').count() + 1);
        let message = e.message().to_string();
        let field = message
            .split('`')
            .nth(1)
            .map(str::to_string)
            .filter(|f| !f.is_empty());
        RegistryError::Parse {
            path: origin.to_path_buf(),
            line,
            field,
            message,
        }
    })?;
    Ok(validate_profile(file.into())?)
}

pub fn load_profile(path: &Path) -> Result<RuntimeProfile, RegistryError> {
    let text = fs::read_to_string(path).map_err(|source| RegistryError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_profile(&text, path)
}
