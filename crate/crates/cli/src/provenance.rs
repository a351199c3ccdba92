//! Provenance headers: every output file records the tool version and a
//! hash of the configuration that produced it. No timestamps, so outputs
//! stay byte-reproducible.

use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const TOOL: &str = concat!("rawbench v", env!("CARGO_PKG_VERSION"));

/// Short hex digest of a canonical config rendering.
pub fn config_hash(canonical: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    hex_prefix(&digest, 16)
}

pub fn file_hash(path: &Path) -> std::io::Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(fs::read(path)?);
    let digest = hasher.finalize();
    Ok(hex_prefix(&digest, 16))
}

fn hex_prefix(digest: &[u8], chars: usize) -> String {
    let mut out = String::with_capacity(chars);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
        if out.len() >= chars {
            break;
        }
    }
    out.truncate(chars);
    out
}

/// Standard header lines for generated files.
pub fn header(config_digest: &str, extra: &[(&str, String)]) -> Vec<String> {
    let mut lines = vec![TOOL.to_string(), format!("config_hash={config_digest}")];
    for (key, value) in extra {
        lines.push(format!("{key}={value}"));
    }
    lines
}

/// Write only when contents differ; returns true when the file changed.
pub fn write_if_changed(path: &Path, contents: &[u8]) -> std::io::Result<bool> {
    if let Ok(existing) = fs::read(path) {
        if existing == contents {
            return Ok(false);
        }
    }
    fs::write(path, contents)?;
    Ok(true)
}
