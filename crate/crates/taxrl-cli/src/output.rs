//! Artifact writing: every file lands in the run's output directory with a
//! config-hash stamp so downstream commands can refuse mismatched inputs.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

/// CSV and text artifacts get a leading comment line carrying the hash.
pub fn write_stamped(dir: &Path, name: &str, config_hash: &str, body: &str) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let content = format!("# config_hash={config_hash}\n{body}");
    fs::write(&path, content)?;
    Ok(path)
}

/// Raw write for artifacts that embed the hash themselves (JSON).
pub fn write_plain(dir: &Path, name: &str, body: &str) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, body)?;
    Ok(path)
}
