//! The settings a command ran with, written next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use pnp_core::geometry::CameraModel;
use pnp_core::numerics::HourglassConfig;
use serde::{Deserialize, Serialize};

use crate::error::{usage, CliError, Result};

pub const RUN_CONFIG: &str = "run_config.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub task: Option<String>,
    pub module: Option<String>,
    pub demos: Option<u64>,
    pub steps: Option<u64>,
    #[serde(default)]
    pub snapshots: Vec<u64>,
    pub attention_variant: Option<String>,
    pub transport_variant: Option<String>,
    pub train_method: Option<String>,
    #[serde(default)]
    pub infer_methods: Vec<String>,
    pub scenes: Option<usize>,
    pub seed: u64,
    pub learning_rate: Option<f64>,
    pub camera: Option<CameraModel>,
    pub network: Option<HourglassConfig>,
    pub crop: Option<usize>,
    #[serde(default)]
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
    pub records: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(command: &str, out: &Path, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            out: out.to_path_buf(),
            seed,
            ..Self::default()
        }
    }

    /// Checks settings shared by every command.
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = &self.task {
            t.parse::<pnp_core::scene::Task>().map_err(|e| usage!("{e}"))?;
        }
        if let Some(steps) = self.steps {
            if let Some(s) = self.snapshots.iter().find(|s| **s == 0 || **s > steps) {
                return Err(usage!("snapshot {s} lies outside 1..={steps}"));
            }
        }
        if self.snapshots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(usage!("snapshots must be strictly increasing"));
        }
        if self.learning_rate.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(usage!("learning rate must be positive"));
        }
        if self.scenes == Some(0) {
            return Err(usage!("at least one scene is needed"));
        }
        if let Some(c) = &self.camera {
            c.validate().map_err(|e| usage!("{e}"))?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RUN_CONFIG), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_CONFIG);
        let bytes = fs::read(&path)?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
    }
}
