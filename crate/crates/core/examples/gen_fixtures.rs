//! Regenerates the shipped golden fixtures and built-in profile files.
//!
//! Usage: cargo run --example gen_fixtures -- [repo-root]

use std::path::PathBuf;

use wasiprof::fixtures::write_fixtures;
use wasiprof::registry::{builtin_profiles, profile_to_toml};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| ".".into());
    let written = write_fixtures(&root.join("fixtures"))?;
    println!("{} fixture logs", written.len());
    let profiles = root.join("profiles");
    std::fs::create_dir_all(&profiles)?;
    for p in builtin_profiles() {
        std::fs::write(profiles.join(format!("{}.toml", p.name)), profile_to_toml(&p))?;
    }
    Ok(())
}
