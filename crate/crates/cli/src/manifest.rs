use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to re-run a command: the fully resolved configuration
/// (flags, file and defaults already merged, paths absolute) plus hashes of
/// what it read and wrote. Output paths are relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).with_context(|| format!("cannot read {}", path.display()))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize, inputs: &[PathBuf], outputs: &[PathBuf], out: &Path) -> Result<Self> {
        let hash_all = |paths: &[PathBuf], base: Option<&Path>| -> Result<Vec<FileHash>> {
            let mut v = paths
                .iter()
                .map(|p| {
                    let full = base.map_or_else(|| p.clone(), |b| b.join(p));
                    Ok(FileHash {
                        path: p.clone(),
                        sha256: sha256_file(&full)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            v.sort_by(|a, b| a.path.cmp(&b.path));
            v.dedup();
            Ok(v)
        };
        Ok(RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::to_value(config).context("configuration is not serialisable")?,
            inputs: hash_all(inputs, None)?,
            outputs: hash_all(outputs, Some(out))?,
        })
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("{} is not a run manifest", path.display()))
    }

    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).with_context(|| format!("manifest config does not fit `{}`", self.command))
    }

    /// Fail unless every recorded input still has its recorded hash.
    pub fn check_inputs(&self) -> Result<()> {
        for f in &self.inputs {
            let now = sha256_file(&f.path)?;
            if now != f.sha256 {
                bail!("input {} changed since the recorded run", f.path.display());
            }
        }
        Ok(())
    }

    /// Names of outputs whose hashes differ from `other`'s.
    pub fn output_mismatches(&self, other: &RunManifest) -> Vec<String> {
        let mut bad: Vec<String> = self
            .outputs
            .iter()
            .filter(|f| !other.outputs.contains(f))
            .map(|f| f.path.display().to_string())
            .collect();
        bad.extend(
            other
                .outputs
                .iter()
                .filter(|f| !self.outputs.iter().any(|g| g.path == f.path))
                .map(|f| f.path.display().to_string()),
        );
        bad
    }
}
