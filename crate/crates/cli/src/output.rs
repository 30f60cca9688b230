//! Output directory with hashed writes and the run manifest.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Writes files below a root directory and records their hashes. Paths that
/// would leave the root are rejected.
#[derive(Debug)]
pub struct OutDir {
    root: PathBuf,
    written: BTreeMap<String, String>,
}

impl OutDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(OutDir {
            root: root.to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn resolve(&self, rel: &str) -> CliResult<PathBuf> {
        let p = Path::new(rel);
        if rel.is_empty() || !p.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(CliError::config(format!(
                "output path {rel:?} leaves the output directory"
            )));
        }
        Ok(self.root.join(p))
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        let path = self.resolve(rel)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        let bytes = bytes.as_ref();
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.written.insert(rel.to_string(), sha256_hex(bytes));
        tracing::debug!(file = rel, "wrote");
        Ok(())
    }

    pub fn write_json(&mut self, rel: &str, value: &impl Serialize) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).expect("output serializes");
        text.push('\n');
        self.write(rel, text)
    }

    /// Writes `manifest.json` listing everything written so far.
    pub fn finish(
        mut self,
        command: &str,
        config: &ExperimentConfig,
        inputs: BTreeMap<String, InputFile>,
    ) -> CliResult<Manifest> {
        let content_hash = sha256_hex(
            self.written
                .iter()
                .map(|(k, v)| format!("{k} {v}\n"))
                .collect::<String>()
                .as_bytes(),
        );
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.clone(),
            inputs,
            outputs: std::mem::take(&mut self.written),
            content_hash,
        };
        self.write_json("manifest.json", &manifest)?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputFile {
    pub fn read(path: &Path) -> CliResult<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let f = InputFile {
            path: path.to_path_buf(),
            sha256: sha256_hex(text.as_bytes()),
        };
        Ok((f, text))
    }
}

/// Everything needed to rerun a command: the resolved config, the input
/// files it read and hashes of what it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub inputs: BTreeMap<String, InputFile>,
    /// Relative path to sha256.
    pub outputs: BTreeMap<String, String>,
    /// Hash over the sorted `outputs` entries.
    pub content_hash: String,
}

impl Manifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_escaping_paths() {
        let dir = std::env::temp_dir().join(format!("tro-out-{}", std::process::id()));
        let mut out = OutDir::create(&dir).unwrap();
        for bad in ["../x", "/tmp/x", "a/../../x", ""] {
            assert!(out.write(bad, "x").is_err(), "{bad}");
        }
        out.write("a/b.txt", "hello").unwrap();
        assert_eq!(std::fs::read_to_string(dir.join("a/b.txt")).unwrap(), "hello");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
