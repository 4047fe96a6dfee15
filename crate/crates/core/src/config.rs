//! Run configuration files and the manifests written next to every output.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{load_incidence_csv, write_atomic, Dataset, IncidenceKind};
use crate::error::{Error, Result};
use crate::trainer::{Grid, TrainConfig};

/// Everything a CLI run needs. Loaded from TOML; command-line flags are
/// applied on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub features_static: Option<PathBuf>,
    pub features_dynamic: Option<PathBuf>,
    pub task: IncidenceKind,
    pub issue_date: Option<NaiveDate>,
    pub out: PathBuf,
    /// Week offsets to train, one model each.
    pub week_offsets: Vec<usize>,
    pub jobs: usize,
    pub train: TrainConfig,
    pub grid: Grid,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            features_static: None,
            features_dynamic: None,
            task: IncidenceKind::Deaths,
            issue_date: None,
            out: PathBuf::from("out"),
            week_offsets: (1..=crate::evaluator::WEEKS).collect(),
            jobs: 1,
            train: TrainConfig::default(),
            grid: Grid::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Checks the numeric settings and that every input path exists.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let max = crate::evaluator::WEEKS;
        if self.week_offsets.is_empty() || self.week_offsets.iter().any(|k| *k == 0 || *k > max) {
            return Err(Error::Config(format!(
                "week offsets must lie in 1..={max}, got {:?}",
                self.week_offsets
            )));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        for path in [&self.data, &self.features_static, &self.features_dynamic].into_iter().flatten() {
            if !path.is_file() {
                return Err(Error::io(
                    path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
                ));
            }
        }
        Ok(())
    }

    pub fn data_path(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Usage("no data file given (--data or `data` in the config)".into()))
    }

    /// Loads incidence plus any features. Cumulative wide files are
    /// converted to daily incidence.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut ds = load_incidence_csv(self.data_path()?, self.task)?.into_incidence();
        if let Some(p) = &self.features_static {
            ds.attach_static_features(p)?;
        }
        if let Some(p) = &self.features_dynamic {
            ds.attach_dynamic_features(p)?;
        }
        Ok(ds)
    }

    /// The data through the issue date, or all of it when none is set.
    pub fn history(&self, ds: &Dataset) -> Result<Dataset> {
        match self.issue_date {
            Some(date) => ds.through_date(date),
            None => Ok(ds.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance written as `manifest.json` beside a command's outputs. It
/// holds no timestamps so identical runs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub inputs: Vec<InputDigest>,
    pub dataset_fingerprint: Option<String>,
    pub outputs: Vec<String>,
    pub versions: Versions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub acts: String,
    pub checkpoint_format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Versions {
            acts: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: crate::trainer::CHECKPOINT_VERSION,
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, extra_inputs: &[&Path]) -> Result<Self> {
        let mut inputs = Vec::new();
        let paths = [&config.data, &config.features_static, &config.features_dynamic];
        for path in paths.into_iter().flatten().map(PathBuf::as_path).chain(extra_inputs.iter().copied()) {
            inputs.push(InputDigest {
                path: path.to_path_buf(),
                sha256: sha256_file(path)?,
            });
        }
        Ok(Manifest {
            command: command.to_string(),
            config: config.clone(),
            seed: config.train.seed,
            inputs,
            dataset_fingerprint: None,
            outputs: Vec::new(),
            versions: Versions::default(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
