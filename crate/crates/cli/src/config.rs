//! Run configuration: one TOML file whose sections mirror the library's
//! configuration structs. Missing keys take their defaults, unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use lanepilot_core::ddqn::TrainConfig;
use lanepilot_core::eval::EvalSettings;
use lanepilot_core::reward::RewardWeights;
use lanepilot_core::sim::ScenarioConfig;
use lanepilot_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "LANEPILOT_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "lanepilot-out";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, overrides both `train.seed` and `eval.seed`.
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub scenario: ScenarioConfig,
    pub reward: RewardWeights,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Push the top-level seed down into the sections.
    pub fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.eval.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.reward.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.scenario.desired_speed != self.reward.desired_speed {
            return Err(Error::Config(format!(
                "scenario.desired_speed ({}) and reward.desired_speed ({}) must agree",
                self.scenario.desired_speed, self.reward.desired_speed
            )));
        }
        Ok(())
    }

    /// Flag, then config file, then environment, then the built-in default.
    pub fn resolve_output_dir(&self, flag: Option<&Path>, env: Option<&str>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration is always representable")
    }
}
