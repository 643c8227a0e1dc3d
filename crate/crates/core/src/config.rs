//! Run configuration read from a TOML file.
//!
//! Every section is optional and every key has a default; unknown keys are
//! rejected with the offending key and its line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clsnet::StudentConfig;
use crate::datagen::{SceneSpec, SplitCounts};
use crate::distill::DistillConfig;
use crate::error::{bail, Error, Result};
use crate::wsdnet::TeacherConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub scene: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train: 3000, val: 500, test: 1000, scene: SceneSpec::default() }
    }
}

impl DataConfig {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts { train: self.train, val: self.val, test: self.test }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub topk: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { topk: 3, batch_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub seeds: usize,
    /// Worker threads; seeds are independent, so results do not depend on it.
    /// Zero means one per available core.
    pub threads: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig { seeds: 3, threads: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub distill: DistillConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Config::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The 200-image configuration used for quick end-to-end runs.
    pub fn smoke() -> Config {
        let mut cfg = Config::default();
        cfg.data.train = 120;
        cfg.data.val = 40;
        cfg.data.test = 40;
        cfg.teacher.epochs = 2;
        cfg.distill.stage1_max_epochs = 2;
        cfg.distill.stage2_epochs = 2;
        cfg.ablate.seeds = 1;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.distill.validate()?;
        self.data.scene.validate()?;
        let k = self.data.scene.num_classes;
        if self.teacher.num_classes != k || self.student.num_classes != k {
            bail!(
                Config,
                "class counts disagree: data {k}, teacher {}, student {}",
                self.teacher.num_classes,
                self.student.num_classes
            );
        }
        if self.student.input_size != self.data.scene.image_size {
            bail!(
                Config,
                "student.input_size {} must equal data.scene.image_size {}",
                self.student.input_size,
                self.data.scene.image_size
            );
        }
        if self.student.channels != self.teacher.channels {
            bail!(Config, "student and teacher conv stacks must have the same channels");
        }
        if self.student.roi_out != self.teacher.roi_out {
            bail!(Config, "student.roi_out must equal teacher.roi_out");
        }
        if self.eval.topk == 0 || self.eval.topk > k {
            bail!(Config, "eval.topk must be in 1..={k}");
        }
        if self.eval.batch_size == 0 || self.ablate.seeds == 0 {
            bail!(Config, "eval.batch_size and ablate.seeds must be positive");
        }
        Ok(())
    }
}
