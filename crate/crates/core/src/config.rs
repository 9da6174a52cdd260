//! Run configuration: one JSON document, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::DecodeParams;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::{Dataset, Profile, SceneSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Linear ramp of the learning rate over this many initial iterations.
    #[serde(default)]
    pub warmup_iterations: usize,
    /// Save a checkpoint every this many iterations; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            momentum: default_momentum(),
            iterations: 800,
            seed: 0,
            warmup_iterations: 0,
            checkpoint_every: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate used for the step at zero-based index `step`: linear
    /// warmup, then x0.1 from two thirds and x0.01 from five sixths of the run.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let n = self.iterations;
        let mut lr = self.learning_rate;
        if step < self.warmup_iterations {
            lr *= (step + 1) as f64 / self.warmup_iterations as f64;
        }
        if step >= 5 * n / 6 {
            lr * 0.01
        } else if step >= 2 * n / 3 {
            lr * 0.1
        } else {
            lr
        }
    }
}

/// Where training and evaluation images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// A dataset directory; relative paths resolve against the config file.
    Dir(PathBuf),
    /// Scenes generated in memory from explicit specs.
    Scenes(Vec<SceneSpec>),
    /// `images` scenes of a named profile with seeds `seed, seed + 1, ...`.
    Generated { profile: Profile, images: usize, seed: u64 },
}

impl DataSource {
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self {
            DataSource::Dir(dir) => Dataset::load(&base.join(dir)),
            DataSource::Scenes(specs) => Dataset::generate(specs),
            DataSource::Generated { profile, images, seed } => Dataset::generate(&profile.specs(*images, *seed)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataSource,
    #[serde(default)]
    pub eval: DecodeParams,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.eval.validate()?;
        self.model.backbone()?.validate()?;
        self.model.pyramid().validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serialising plain data") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
