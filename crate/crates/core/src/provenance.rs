//! Provenance stamps written at the top of every output artifact.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const TOOL_NAME: &str = "adherence";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Provenance { tool_version: TOOL_VERSION.to_string(), config_hash: config_hash.into(), seed }
    }

    /// Stamp for artifacts produced outside a configured run (tests, FFI).
    pub fn unconfigured(seed: u64) -> Self {
        Provenance::new("none", seed)
    }

    pub fn describe(&self) -> String {
        format!("{TOOL_NAME} {} config={} seed={}", self.tool_version, self.config_hash, self.seed)
    }

    /// `# ...` line for CSV and JSONL outputs, newline-terminated.
    pub fn comment_line(&self) -> String {
        format!("# {}\n", self.describe())
    }

    pub fn xml_comment(&self) -> String {
        format!("<!-- {} -->\n", self.describe())
    }
}

/// First 16 hex digits of the SHA-256 of the value's canonical JSON.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialize");
    let digest = Sha256::digest(&bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Fingerprint of an ordered list of names (feature dictionaries).
pub fn fingerprint<S: AsRef<str>>(names: &[S]) -> String {
    let mut hasher = Sha256::new();
    for n in names {
        hasher.update(n.as_ref().as_bytes());
        hasher.update([0u8]);
    }
    hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comment_line_format() {
        let p = Provenance::new("abc", 42);
        assert_eq!(p.comment_line(), format!("# adherence {TOOL_VERSION} config=abc seed=42\n"));
    }

    #[test]
    fn fingerprint_is_order_sensitive() {
        assert_ne!(fingerprint(&["a", "b"]), fingerprint(&["b", "a"]));
        assert_ne!(fingerprint(&["ab"]), fingerprint(&["a", "b"]));
        assert_eq!(hash_json(&[1, 2]).len(), 16);
    }
}
