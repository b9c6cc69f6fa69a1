use std::fmt::Write;

use sha2::{Digest, Sha256};

pub fn sha256_hex(data: &[u8]) -> String {
    let out = Sha256::digest(data);
    let mut s = String::with_capacity(64);
    for b in out.iter() {
        write!(s, "{b:02x}").expect("writing to a string");
    }
    s
}

/// First 16 hex digits of the SHA-256, used to name runs and artifacts.
pub fn fingerprint(data: &[u8]) -> String {
    sha256_hex(data)[..16].to_owned()
}
