//! Stable hashing utilities.
//!
//! FNV-1a is used wherever a hash feeds determinism-sensitive paths (token
//! bucketing, derived seeds, the mock backend): unlike `DefaultHasher` it is
//! pinned across Rust releases and platforms. SHA-256 is used for artifact
//! fingerprints.

use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{PulseError, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Deterministic per-label seed from a global seed, e.g. one RNG stream per
/// user or per stage.
pub fn derive_seed(global_seed: u64, label: &str) -> u64 {
    let mut buf = Vec::with_capacity(8 + label.len());
    buf.extend_from_slice(&global_seed.to_le_bytes());
    buf.extend_from_slice(label.as_bytes());
    fnv1a64(&buf)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| PulseError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| PulseError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
