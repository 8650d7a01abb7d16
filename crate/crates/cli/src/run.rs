//! Run directories: resolved config, checkpoints, CSV traces and a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use pacbayes_core::data::{self, LabelKind, LabeledDataset};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const INIT_CKPT: &str = "init.bin";
pub const SGD_CKPT: &str = "sgd.bin";
pub const POSTERIOR_CKPT: &str = "posterior.bin";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub name: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub argv: Vec<String>,
    pub config_digest: String,
    pub outputs: Vec<OutputFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating run directory {}", path.display()))?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_config(&self, cfg: &ExperimentConfig) -> anyhow::Result<()> {
        fs::write(self.file(CONFIG_FILE), cfg.to_toml()?)?;
        Ok(())
    }

    /// Appends an entry recording `outputs` (relative to the run directory).
    pub fn record(&self, command: &str, cfg: &ExperimentConfig, outputs: &[String]) -> anyhow::Result<()> {
        let path = self.file(MANIFEST_FILE);
        let mut manifest: Manifest = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).context("reading manifest")?,
            Err(_) => Manifest {
                schema_version: 1,
                name: cfg.name.clone(),
                entries: Vec::new(),
            },
        };
        let outputs = outputs
            .iter()
            .map(|name| {
                let bytes = fs::read(self.file(name)).with_context(|| format!("hashing {name}"))?;
                Ok(OutputFile {
                    path: name.clone(),
                    sha256: hex::encode(Sha256::digest(bytes)),
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        manifest.entries.push(ManifestEntry {
            command: command.into(),
            argv: std::env::args().collect(),
            config_digest: cfg.digest()?,
            outputs,
        });
        fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Train and test sets as selected by the config.
pub fn load_data(cfg: &ExperimentConfig) -> anyhow::Result<(LabeledDataset, LabeledDataset)> {
    let dir = cfg.data_dir();
    let (mut train, mut test) = data::load_binary_mnist(&dir)?;
    if let Some(n) = cfg.data.subset {
        train = train.head(n)?;
    }
    if cfg.data.labels == LabelKind::Random {
        train = data::randomize_labels(&train, cfg.seed);
        test = data::randomize_labels(&test, cfg.seed.wrapping_add(1));
    }
    log::info!("loaded {} training and {} test examples from {}", train.len(), test.len(), dir.display());
    Ok((train, test))
}
