//! Run directories, stage outputs and manifests.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Resolved;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub tool_version: &'a str,
    pub config_source: Option<String>,
    /// The config file exactly as read.
    pub config_text: &'a str,
    pub overrides: &'a [String],
    pub resolved_config: serde_json::Value,
    pub seeds: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64), CliError> {
    let mut f = std::fs::File::open(path).map_err(|e| CliError::io(format!("cannot open {}", path.display()), e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut n = 0u64;
    loop {
        let k = f
            .read(&mut buf)
            .map_err(|e| CliError::io(format!("cannot read {}", path.display()), e))?;
        if k == 0 {
            break;
        }
        h.update(&buf[..k]);
        n += k as u64;
    }
    let hex = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok((hex, n))
}

/// One stage's working state: declared inputs, produced outputs and the
/// provenance that goes into its manifest.
pub struct Stage<'a> {
    pub name: &'static str,
    pub run_dir: PathBuf,
    pub dir: PathBuf,
    pub resolved: &'a Resolved,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl<'a> Stage<'a> {
    pub fn open(run_dir: &Path, name: &'static str, resolved: &'a Resolved) -> Result<Self, CliError> {
        let dir = run_dir.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("cannot create {}", dir.display()), e))?;
        let manifest = dir.join(MANIFEST);
        if manifest.exists() {
            std::fs::remove_file(&manifest)
                .map_err(|e| CliError::io(format!("cannot remove stale {}", manifest.display()), e))?;
        }
        Ok(Self {
            name,
            run_dir: run_dir.to_path_buf(),
            dir,
            resolved,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// Default location of another stage's output in this run.
    pub fn prior(&self, stage: &str, file: &str) -> PathBuf {
        self.run_dir.join(stage).join(file)
    }

    /// Registers an input; it must exist.
    pub fn input(&mut self, path: &Path) -> Result<PathBuf, CliError> {
        if !path.is_file() {
            return Err(CliError::Io(format!("{}: input {} not found", self.name, path.display())));
        }
        if !self.inputs.iter().any(|p| p == path) {
            self.inputs.push(path.to_path_buf());
        }
        Ok(path.to_path_buf())
    }

    /// Registers an output file of this stage and returns its path.
    pub fn output(&mut self, file: &str) -> PathBuf {
        let p = self.dir.join(file);
        if !self.outputs.contains(&p) {
            self.outputs.push(p.clone());
        }
        p
    }

    pub fn write(&mut self, file: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.output(file);
        std::fs::write(&p, bytes).map_err(|e| CliError::io(format!("cannot write {}", p.display()), e))
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, file: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("stage output serializes");
        text.push('\n');
        self.write(file, text)
    }

    fn display(&self, p: &Path) -> String {
        p.strip_prefix(&self.run_dir)
            .map(|r| r.to_string_lossy().replace('\\', "/"))
            .unwrap_or_else(|_| p.display().to_string())
    }

    fn digests(&self, paths: &[PathBuf]) -> Result<Vec<FileDigest>, CliError> {
        paths
            .iter()
            .map(|p| {
                let (sha256, bytes) = sha256_file(p)?;
                Ok(FileDigest {
                    path: self.display(p),
                    sha256,
                    bytes,
                })
            })
            .collect()
    }

    /// Writes the manifest after every output is on disk.
    pub fn finish(self, stage_seed: Option<u64>) -> Result<PathBuf, CliError> {
        let r = self.resolved;
        let manifest = RunManifest {
            command: self.name,
            tool_version: env!("CARGO_PKG_VERSION"),
            config_source: r.source.as_ref().map(|p| p.display().to_string()),
            config_text: &r.text,
            overrides: &r.overrides,
            resolved_config: serde_json::to_value(&r.config).expect("config serializes"),
            seeds: serde_json::json!({ "top": r.config.seed, "stage": stage_seed }),
            inputs: self.digests(&self.inputs)?,
            outputs: self.digests(&self.outputs)?,
        };
        let p = self.dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&p, text).map_err(|e| CliError::io(format!("cannot write {}", p.display()), e))?;
        Ok(p)
    }
}
