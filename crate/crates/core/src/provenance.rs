//! Replay metadata embedded in every output file.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const TOOL_NAME: &str = "ragscope";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Compact JSON with object keys in lexicographic order at every level.
pub fn canonical_json(value: &Value) -> String {
    // serde_json's default map is ordered by key, so a round trip through
    // `Value` sorts every object.
    let sorted: Value = serde_json::from_str(&value.to_string()).expect("valid JSON");
    sorted.to_string()
}

/// Hex SHA-256 of the canonical JSON encoding of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let value = serde_json::to_value(config).expect("config serializes to JSON");
    hex::encode(Sha256::digest(canonical_json(&value).as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new<T: Serialize>(config: &T, seed: u64) -> Provenance {
        Provenance {
            tool: TOOL_NAME,
            version: TOOL_VERSION,
            config_hash: config_hash(config),
            seed,
        }
    }

    /// One-line form used as a `#` comment in CSV outputs.
    pub fn comment(&self) -> String {
        format!(
            "{} {} config_hash={} seed={}",
            self.tool, self.version, self.config_hash, self.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn canonical_form_sorts_keys() {
        let v = json!({"b": 1, "a": {"z": [1, 2], "y": null}});
        assert_eq!(canonical_json(&v), r#"{"a":{"y":null,"z":[1,2]},"b":1}"#);
    }

    #[test]
    fn hash_tracks_config() {
        let a = json!({"seed": 1, "k": 3});
        let b = json!({"k": 3, "seed": 1});
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_ne!(config_hash(&a), config_hash(&json!({"seed": 2, "k": 3})));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
