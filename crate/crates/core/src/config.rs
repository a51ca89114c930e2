//! TOML project configuration shared by the command-line tools.
//!
//! Every section is optional; missing keys take their library defaults.
//!
//! ```toml
//! seed = 3
//!
//! [dataset]
//! scenes = 40
//! profile = "real"
//!
//! [model]
//! k = 8
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{DomainProfile, SceneSpec};
use crate::error::{Error, Result};
use crate::nn::FusionConfig;
use crate::pipeline::Preprocess;
use crate::stream::StreamConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub scene: SceneSpec,
    pub profiles: Profiles,
    pub preprocess: Preprocess,
    pub model: FusionConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub stream: StreamConfig,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            scene: SceneSpec::default(),
            profiles: Profiles::default(),
            preprocess: Preprocess::default(),
            model: FusionConfig::desk(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            stream: StreamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub scenes: usize,
    /// Name of an entry in `[profiles]`.
    pub profile: String,
    pub train_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { scenes: 120, profile: "sim".into(), train_fraction: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Profiles {
    pub sim: DomainProfile,
    pub real: DomainProfile,
}

impl Default for Profiles {
    fn default() -> Self {
        Self { sim: DomainProfile::sim(), real: DomainProfile::real() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    /// `"head.last2"` or a comma-separated list of trainable groups.
    pub freeze: String,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { train: TrainConfig::finetune(), freeze: "head.last2".into() }
    }
}

impl ProjectConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let parse_err = |e: toml::de::Error| Error::Config(e.message().to_string());
        let overrides: toml::Table = toml::from_str(text).map_err(parse_err)?;
        // Keys are laid over the full default configuration, so a partial
        // section keeps the project defaults rather than its type's own.
        let mut merged = toml::Table::try_from(Self::default()).expect("configuration serializes");
        merge(&mut merged, overrides);
        let config: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(parse_err)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn profile(&self, name: &str) -> Result<DomainProfile> {
        match name {
            "sim" => Ok(self.profiles.sim),
            "real" => Ok(self.profiles.real),
            other => Err(Error::Config(format!("unknown profile {other:?}; expected sim or real"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.scenes == 0 {
            return Err(Error::Config("dataset.scenes must be positive".into()));
        }
        if !(self.dataset.train_fraction > 0.0 && self.dataset.train_fraction < 1.0) {
            return Err(Error::Config("dataset.train_fraction must lie in (0, 1)".into()));
        }
        self.profile(&self.dataset.profile)?.validate()?;
        self.profiles.sim.validate()?;
        self.profiles.real.validate()?;
        self.scene.validate()?;
        self.preprocess.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.finetune.train.validate()?;
        self.stream.validate()?;
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (key, value) in overrides {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}
