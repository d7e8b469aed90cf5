//! Experiment configuration: one versioned JSON document wiring the model,
//! training protocol, data source, and metric constants together.
//! Unknown keys are rejected so typos in ablation flags cannot pass
//! silently.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_features, read_manifest, split_records, synth_generate, DatasetSplit, Role,
    SyntheticGenConfig, UtteranceRecord,
};
use crate::error::{Error, Result};
use crate::metrics::TdcfParams;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

fn default_t_fix() -> usize {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSourceKind {
    Synthetic,
    Files,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSourceKind,
    /// Required when `source` is `synthetic`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticGenConfig>,
    /// Directory with train/dev/eval manifests and a `features/` subdir;
    /// required when `source` is `files`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Fixed frame count every utterance is standardized to.
    #[serde(default = "default_t_fix")]
    pub t_fix: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub metrics: TdcfParams,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.metrics.validate()?;
        if self.data.t_fix == 0 {
            return Err(Error::Config("t_fix must be positive".into()));
        }
        match self.data.source {
            DataSourceKind::Synthetic => {
                let synth = self.data.synthetic.as_ref().ok_or_else(|| {
                    Error::Config("synthetic source requires a data.synthetic section".into())
                })?;
                if synth.n_per_class == 0 || synth.t_frames == 0 || synth.feature_dim == 0 {
                    return Err(Error::Config(
                        "synthetic generation needs positive n_per_class, t_frames, feature_dim"
                            .into(),
                    ));
                }
                if synth.feature_dim != self.model.feature_dim {
                    return Err(Error::Config(format!(
                        "data feature_dim {} does not match model feature_dim {}",
                        synth.feature_dim, self.model.feature_dim
                    )));
                }
            }
            DataSourceKind::Files => {
                let dir = self.data.dir.as_ref().ok_or_else(|| {
                    Error::Config("files source requires a data.dir path".into())
                })?;
                if !dir.is_dir() {
                    return Err(Error::Config(format!(
                        "data.dir {} is not a directory",
                        dir.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Load the three splits from the configured source and standardize
    /// every utterance to `t_fix` frames.
    pub fn load_splits(&self) -> Result<(DatasetSplit, DatasetSplit, DatasetSplit)> {
        let (mut train, mut dev, mut eval) = match self.data.source {
            DataSourceKind::Synthetic => {
                let synth = self.data.synthetic.as_ref().expect("validated");
                split_records(synth_generate(synth), synth.seed)
            }
            DataSourceKind::Files => {
                let dir = self.data.dir.as_ref().expect("validated");
                (
                    load_split_dir(dir, Role::Train)?,
                    load_split_dir(dir, Role::Dev)?,
                    load_split_dir(dir, Role::Eval)?,
                )
            }
        };
        for s in [&mut train, &mut dev, &mut eval] {
            s.prepare(self.data.t_fix)?;
        }
        Ok((train, dev, eval))
    }
}

/// Read `<dir>/<role>.csv` and the referenced `<dir>/features/<id>.kft1`
/// files.
fn load_split_dir(dir: &Path, role: Role) -> Result<DatasetSplit> {
    let manifest = dir.join(format!("{}.csv", role.as_str()));
    let labels = read_manifest(&manifest)?;
    let mut records = Vec::with_capacity(labels.len());
    for (id, label) in labels {
        let path = dir.join("features").join(format!("{id}.kft1"));
        let features = load_features(&path)?;
        records.push(UtteranceRecord {
            id,
            features,
            label: Some(label),
        });
    }
    Ok(DatasetSplit::new(records, role))
}
