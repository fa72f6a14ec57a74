//! Run configuration files (TOML) and dataset resolution.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{load_face_dataset, ArmDataset, ArmGenConfig, Dataset, FaceName, Split};
use crate::error::{Error, Result};
use crate::evalkit::{AnnotationCount, HeadConfig};
use crate::trainer::{TrainConfig, TrainingData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// A directory written by `gen-data`, with `train/` and `test/` parts.
    Arm,
    /// A face benchmark under `<root>/<name>/`.
    Faces,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub root: PathBuf,
    /// Face benchmark name; ignored for the arm.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_train_split")]
    pub train_split: Split,
    #[serde(default = "default_test_split")]
    pub test_split: Split,
}

fn default_train_split() -> Split {
    Split::Train
}

fn default_test_split() -> Split {
    Split::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_pairs: usize,
    pub seed: u64,
    pub head: HeadConfig,
    pub counts: Vec<AnnotationCount>,
    pub n_seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_pairs: 1000,
            seed: 0,
            head: HeadConfig::default(),
            counts: [1, 5, 10, 20].into_iter().map(AnnotationCount::Count).collect(),
            n_seeds: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Generator settings for `gen-data`.
    #[serde(default)]
    pub arm: Option<ArmGenConfig>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// A training set as either a flow-annotated arm sequence or plain images.
pub enum LoadedData {
    Arm(ArmDataset),
    Images(Dataset),
}

impl LoadedData {
    pub fn as_training(&self) -> &dyn TrainingData {
        match self {
            LoadedData::Arm(a) => a,
            LoadedData::Images(d) => d,
        }
    }

    pub fn to_dataset(&self, name: &str, split: Split) -> Dataset {
        match self {
            LoadedData::Arm(a) => a.to_dataset(name, split),
            LoadedData::Images(d) => d.clone(),
        }
    }
}

impl DataConfig {
    pub fn face_name(&self) -> Result<FaceName> {
        let name = self.name.as_deref().ok_or_else(|| Error::Config("data.name is required for face data".into()))?;
        name.parse()
    }

    /// Identifier recorded in checkpoints.
    pub fn dataset_id(&self, split: Split) -> String {
        match self.source {
            DataSource::Arm => format!("arm:{}:{}", self.root.display(), split.as_str()),
            DataSource::Faces => {
                format!("{}:{}", self.name.as_deref().unwrap_or("?"), split.as_str())
            }
        }
    }

    pub fn load(&self, split: Split, input_size: usize) -> Result<LoadedData> {
        match self.source {
            DataSource::Arm => {
                let dir = self.root.join(split.as_str());
                if !dir.join("manifest.json").exists() {
                    return Err(Error::MissingFiles(vec![dir.join("manifest.json")]));
                }
                let (arm, _) = ArmDataset::load(&dir)?;
                if arm.config.image_size != input_size {
                    return Err(Error::Config(format!(
                        "arm images are {0}x{0} but the model expects {1}x{1}",
                        arm.config.image_size, input_size
                    )));
                }
                Ok(LoadedData::Arm(arm))
            }
            DataSource::Faces => {
                let faces = load_face_dataset(self.face_name()?, &self.root, split, input_size)?;
                Ok(LoadedData::Images(faces.load_all()?))
            }
        }
    }
}
