//! Record of what a sequence of commands produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: Option<u64>,
    pub config_paths: Vec<PathBuf>,
    pub build: String,
    pub corpus_hash: Option<String>,
    /// Effective configuration of the latest command.
    pub config: Option<String>,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn build_id() -> String {
    format!(
        "{} ({})",
        env!("CARGO_PKG_VERSION"),
        option_env!("PROCTER_GIT_REV").unwrap_or("unknown")
    )
}

impl RunManifest {
    /// Loads `path` if it exists, otherwise starts an empty manifest.
    pub fn open(path: &Path) -> anyhow::Result<Self> {
        let mut m = if path.exists() {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing manifest {}", path.display()))?
        } else {
            RunManifest::default()
        };
        m.build = build_id();
        Ok(m)
    }

    pub fn record_config(&mut self, cfg: &RunConfig, file: Option<&Path>) {
        if let Some(f) = file {
            if !self.config_paths.iter().any(|p| p == f) {
                self.config_paths.push(f.to_path_buf());
            }
        }
        self.seed.get_or_insert(cfg.synth.seed);
        self.config = Some(cfg.to_toml());
    }

    pub fn stage(&mut self, name: &str, outputs: Vec<PathBuf>) {
        self.stages
            .insert(name.to_string(), StageRecord { outputs });
    }

    /// Writes the manifest after checking every referenced artifact exists.
    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        for (name, s) in &self.stages {
            for o in &s.outputs {
                if !o.exists() {
                    bail!("stage {name} lists {} but it does not exist", o.display());
                }
            }
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
