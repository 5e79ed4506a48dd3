//! File helpers: atomic writes and reads that report the path.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Writes `bytes` to a temporary sibling of `path`, syncs it and renames it
/// into place, so readers see either the old file or the complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let res = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    res.with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Reads a UTF-8 input file; a missing or unreadable file is a usage error
/// naming the path.
pub fn read_input(path: &Path, what: &str) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::usage(format!("{what}: cannot read {}: {e}", path.display())))
}

pub fn read_input_bytes(path: &Path, what: &str) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::usage(format!("{what}: cannot read {}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
