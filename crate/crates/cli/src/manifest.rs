use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ProblemConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// SHA-256 of the canonical JSON form of the resolved problem.
    pub config_hash: Option<String>,
    pub config: Option<ProblemConfig>,
    /// Subcommand options after defaults were applied.
    pub parameters: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub outputs: Vec<OutputFile>,
    pub duration_secs: f64,
}

/// Compact JSON of the config with object keys sorted.
pub fn canonical_json(cfg: &ProblemConfig) -> String {
    let v = serde_json::to_value(cfg).expect("config serializes");
    serde_json::to_string(&v).expect("value serializes")
}

pub fn config_hash(cfg: &ProblemConfig) -> String {
    sha256_hex(canonical_json(cfg).as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_entry(dir: &Path, name: &str) -> CliResult<OutputFile> {
    let p = dir.join(name);
    let bytes = std::fs::read(&p).map_err(|e| CliError::io(&p, e))?;
    Ok(OutputFile {
        name: name.to_string(),
        sha256: sha256_hex(&bytes),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn hash_ignores_key_order() {
        let a = parse_config("p = \"x2\"\nq = \"-x2\"\nT = 1\nx0 = [0, 0]\n").unwrap();
        let b = parse_config("x0 = [0.0, 0.0]\nT = 1.0\nq = [\"-x2\"]\np = \"x2\"\n").unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let c = parse_config("p = \"x2\"\nq = \"-x2\"\nT = 2\n").unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
    }
}
