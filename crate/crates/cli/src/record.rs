use std::path::{Path, PathBuf};

use crystvox_core::io::write_atomic;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Reproducibility record written as `run.json` next to every command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    pub precision: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    /// SHA-256 over the sorted `path:digest` lines of all inputs.
    pub input_hash: String,
    pub outputs: Vec<String>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

impl RunRecord {
    pub fn new(command: &str, seed: u64, threads: usize, precision: &str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            seed,
            threads,
            precision: precision.to_string(),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            input_hash: String::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(InputDigest { path: path.display().to_string(), sha256 });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(mut self, out_dir: &Path) -> CliResult<PathBuf> {
        let mut lines: Vec<String> = self.inputs.iter().map(|i| format!("{}:{}", i.path, i.sha256)).collect();
        lines.sort();
        self.input_hash = hex(&Sha256::digest(lines.join("\n").as_bytes()));
        let path = out_dir.join("run.json");
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_bytes() {
        assert_eq!(
            hex(&Sha256::digest(b"abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn input_hash_ignores_argument_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        std::fs::write(&a, b"one").unwrap();
        std::fs::write(&b, b"two").unwrap();
        let hash = |paths: &[&Path]| {
            let mut r = RunRecord::new("t", 0, 1, "f32");
            for p in paths {
                r.input(p).unwrap();
            }
            let out = r.finish(dir.path()).unwrap();
            let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
            v["input_hash"].as_str().unwrap().to_string()
        };
        assert_eq!(hash(&[&a, &b]), hash(&[&b, &a]));
    }
}
