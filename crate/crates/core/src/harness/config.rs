use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Task;
use crate::error::{MarioError, Result};
use crate::gvlm::Stage1Config;
use crate::lm::{LoraConfig, SurrogateConfig};
use crate::modality::Modality;
use crate::prompt::PromptConfig;
use crate::router::RouterConfig;

/// Which templates Stage 2 trains and evaluates with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Mario,
    FixedTxt,
    FixedVis,
    FixedMm,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Mario, Mode::FixedTxt, Mode::FixedVis, Mode::FixedMm];

    pub fn fixed(kind: Modality) -> Mode {
        match kind {
            Modality::Txt => Mode::FixedTxt,
            Modality::Vis => Mode::FixedVis,
            Modality::Mm => Mode::FixedMm,
        }
    }

    /// The single template of a fixed mode.
    pub fn template(self) -> Option<Modality> {
        match self {
            Mode::Mario => None,
            Mode::FixedTxt => Some(Modality::Txt),
            Mode::FixedVis => Some(Modality::Vis),
            Mode::FixedMm => Some(Modality::Mm),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mario => "mario",
            Mode::FixedTxt => "fixed-txt",
            Mode::FixedVis => "fixed-vis",
            Mode::FixedMm => "fixed-mm",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = MarioError;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| MarioError::Config(format!("unknown mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    /// Upper bound on epochs; early stopping may end sooner.
    pub epochs: usize,
    pub lr: f64,
    /// Training examples per optimizer step.
    pub batch_size: usize,
    /// Epochs without a validation-accuracy improvement before stopping.
    pub patience: usize,
    pub grad_clip: f64,
    /// Leading `mario` epochs in which every template gets equal LM-side
    /// weight; the router trains on the posterior throughout.
    pub warmup_epochs: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            epochs: 10,
            lr: 3e-3,
            batch_size: 8,
            patience: 3,
            grad_clip: 1.0,
            warmup_epochs: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunPaths {
    pub graph: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything that determines a run. `seed` drives splits and every
/// component initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: Task,
    pub mode: Mode,
    pub seed: u64,
    pub stage1: Stage1Config,
    pub prompt: PromptConfig,
    pub lm: SurrogateConfig,
    pub lora: LoraConfig,
    pub router: RouterConfig,
    pub stage2: Stage2Config,
    /// Not part of the hash.
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Nc,
            mode: Mode::Mario,
            seed: 0,
            stage1: Stage1Config::default(),
            prompt: PromptConfig::default(),
            lm: SurrogateConfig::default(),
            lora: LoraConfig::default(),
            router: RouterConfig::default(),
            stage2: Stage2Config::default(),
            paths: RunPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.limit > self.lm.context {
            return Err(MarioError::Config(format!(
                "prompt limit {} exceeds the LM context {}",
                self.prompt.limit, self.lm.context
            )));
        }
        if self.stage2.batch_size == 0 {
            return Err(MarioError::Config(
                "stage 2 batch size must be positive".into(),
            ));
        }
        if !(self.router.lambda >= 0.0) {
            return Err(MarioError::Config(format!(
                "lambda {} must be nonnegative",
                self.router.lambda
            )));
        }
        self.stage1.tower.validate()
    }

    /// Applies `MARIO_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var("MARIO_SEED") {
            self.seed = s.trim().parse().map_err(|_| {
                MarioError::Config(format!("MARIO_SEED '{s}' is not an unsigned integer"))
            })?;
        }
        Ok(self)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// SHA-256 of the JSON encoding with paths cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = RunPaths::default();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
