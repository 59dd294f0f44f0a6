//! Strict TOML run configuration: every section is optional, unknown keys
//! anywhere are errors.
//!
//! ```toml
//! arch = "tiny-t3d"        # preset name or path to a spec file
//!
//! [data]
//! videos = 200
//! task = "motion"
//!
//! [train]
//! lr0 = 0.1
//! batch_size = 16
//! schedule = { kind = "plateau", patience = 5, factor = 0.1, threshold = 1e-4 }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::data::{SamplerConfig, SyntheticVideoSpec, Task};
use crate::error::{Error, Result};
use crate::training::TrainConfig;
use crate::transfer::{TeacherConfig, TransferConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub videos: usize,
    pub task: Task,
    pub frame_size: usize,
    pub num_frames: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::from_spec(&SyntheticVideoSpec::default(), 200)
    }
}

impl DataConfig {
    pub fn from_spec(spec: &SyntheticVideoSpec, videos: usize) -> Self {
        DataConfig {
            videos,
            task: spec.task,
            frame_size: spec.frame_size,
            num_frames: spec.num_frames,
            noise_std: spec.noise_std,
            seed: spec.seed,
            train_fraction: spec.train_fraction,
        }
    }

    pub fn spec(&self) -> SyntheticVideoSpec {
        SyntheticVideoSpec {
            task: self.task,
            frame_size: self.frame_size,
            num_frames: self.num_frames,
            noise_std: self.noise_std,
            seed: self.seed,
            train_fraction: self.train_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: String,
    pub teacher_arch: String,
    pub data: DataConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub teacher: TeacherConfig,
    pub transfer: TransferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: "tiny-t3d".into(),
            teacher_arch: "teacher-2d".into(),
            data: DataConfig::default(),
            sampler: SamplerConfig::toy(),
            train: TrainConfig::default(),
            teacher: TeacherConfig::default(),
            transfer: TransferConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// A preset name, or else a path to a spec file.
pub fn resolve_arch(name: &str) -> Result<ArchSpec> {
    match ArchSpec::preset(name) {
        Ok(spec) => Ok(spec),
        Err(preset_err) => {
            let path = Path::new(name);
            if path.exists() {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                ArchSpec::parse(&text)
            } else {
                Err(preset_err)
            }
        }
    }
}
