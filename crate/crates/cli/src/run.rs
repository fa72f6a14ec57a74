use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// Record of one command invocation, written as `run_manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub version: String,
    pub outputs: Vec<PathBuf>,
}

pub struct RunDir {
    pub path: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    /// Use `explicit` when given, otherwise `<root>/<timestamp>-seed<seed>`.
    pub fn create(command: &str, root: &Path, explicit: Option<&Path>, seed: u64, config: Option<&Path>) -> Result<Self> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
                let base = root.join(format!("{stamp}-seed{seed}"));
                let mut path = base.clone();
                let mut k = 1;
                while path.exists() {
                    path = PathBuf::from(format!("{}-{k}", base.display()));
                    k += 1;
                }
                path
            }
        };
        fs::create_dir_all(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        Ok(Self {
            path,
            manifest: RunManifest {
                command: command.into(),
                config_path: config.map(Path::to_path_buf),
                seed,
                version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
                outputs: Vec::new(),
            },
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn record(&mut self, path: PathBuf) {
        if !self.manifest.outputs.contains(&path) {
            self.manifest.outputs.push(path);
        }
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.file(name);
        fs::write(&path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))?;
        self.record(path.clone());
        Ok(path)
    }

    /// Write the manifest after checking that every recorded output exists.
    pub fn finish(self) -> Result<PathBuf> {
        if let Some(missing) = self.manifest.outputs.iter().find(|p| !p.exists()) {
            anyhow::bail!("declared output {} was not written", missing.display());
        }
        let path = self.file("run_manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&self.manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        println!("{}", self.path.display());
        Ok(path)
    }
}
