//! File formats, configuration, and serialized records for the
//! activation-communication harness.
//!
//! The algorithmic core lives in `acomm-core`; this crate adds everything
//! that touches the filesystem: the ACWT weight/map format, the flat
//! key-value run configuration with its canonical hash, and the JSON-lines
//! record types written by the CLI.

pub mod config;
pub mod format;
pub mod records;

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Version string stamped into every artifact.
pub fn tool_version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}
