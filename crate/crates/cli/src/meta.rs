use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use partsight_core::fsutil::{digest_tree, read, write_json};
use partsight_core::seed::sha256_hex;
use partsight_core::Result;

pub const METADATA_FILE: &str = "run.json";

/// Digest of a file or directory tree. A file digests to the SHA-256 of its
/// bytes; a directory to a SHA-256 over the sorted `path\tsha256` listing of
/// its files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeDigest {
    pub sha256: String,
    pub files: usize,
}

pub fn tree_digest(path: &Path) -> Result<TreeDigest> {
    if path.is_file() {
        return Ok(TreeDigest {
            sha256: sha256_hex(&read(path)?),
            files: 1,
        });
    }
    let files = digest_tree(path, &[METADATA_FILE])?;
    let listing: String = files.iter().map(|(p, d)| format!("{p}\t{d}\n")).collect();
    Ok(TreeDigest {
        sha256: sha256_hex(listing.as_bytes()),
        files: files.len(),
    })
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub parallel: bool,
    pub config: Value,
    pub inputs: BTreeMap<String, TreeDigest>,
    pub outputs: BTreeMap<String, TreeDigest>,
}

impl RunMetadata {
    pub fn new(command: &str, seed: Option<u64>, parallel: bool, config: Value) -> Self {
        RunMetadata {
            command: command.to_owned(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
            seed,
            parallel,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.insert(name.to_owned(), tree_digest(path)?);
        Ok(())
    }

    pub fn output(&mut self, name: &str, path: &Path) -> Result<()> {
        self.outputs.insert(name.to_owned(), tree_digest(path)?);
        Ok(())
    }

    /// Writes `run.json` inside a directory output, `<file>.run.json` next
    /// to a file output, or one JSON line on stderr without an output.
    pub fn emit(&self, out: Option<&Path>) -> Result<()> {
        match out {
            Some(p) => write_json(&metadata_path(p), self),
            None => {
                eprintln!("{}", serde_json::to_string(self).expect("metadata serializes"));
                Ok(())
            }
        }
    }
}

pub fn metadata_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join(METADATA_FILE)
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".run.json");
        out.with_file_name(name)
    }
}
