//! Run configuration: model kind, architecture, optimizer hyperparameters,
//! and file paths. Loaded from JSON; command-line flags override file
//! values. Training requires an explicit seed (no wall-clock seeding).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cross,
    Early,
    Dual,
}

impl ModelKind {
    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Cross => 0,
            ModelKind::Early => 1,
            ModelKind::Dual => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ModelKind::Cross),
            1 => Some(ModelKind::Early),
            2 => Some(ModelKind::Dual),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cross => "cross",
            ModelKind::Early => "early",
            ModelKind::Dual => "dual",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cross" => Ok(ModelKind::Cross),
            "early" => Ok(ModelKind::Early),
            "dual" => Ok(ModelKind::Dual),
            other => Err(format!("unknown model kind `{other}` (cross|early|dual)")),
        }
    }
}

/// Optimizer hyperparameters. The seed drives init and data order and must
/// be set explicitly for training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Linear learning-rate warmup over this many steps (0 disables it).
    /// Post-LN stacks diverge at useful learning rates without it.
    pub warmup_steps: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: Option<u64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            steps: 500,
            warmup_steps: 0,
            grad_clip: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub vocab: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub train_pairs: Option<PathBuf>,
    pub eval_pairs: Vec<PathBuf>,
    pub pool: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model_kind: ModelKind,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub freeze_encoders: bool,
    /// Lowercase phrases before tokenization (uncased vocabularies).
    pub lowercase: bool,
    /// Optional checkpoint to load before fine-tuning.
    pub init_checkpoint: Option<PathBuf>,
    pub paths: DataPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model_kind: ModelKind::Cross,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            freeze_encoders: false,
            lowercase: true,
            init_checkpoint: None,
            paths: DataPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &std::path::Path) -> Result<Self, crate::Error> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| crate::Error::Config(format!("{}: {e}", path.display())))
    }

    fn require(
        path: &Option<PathBuf>,
        name: &str,
        command: &str,
    ) -> Result<PathBuf, crate::Error> {
        path.clone()
            .ok_or_else(|| crate::Error::Config(format!("`{command}` needs a {name} path")))
    }

    pub fn vocab_path(&self, command: &str) -> Result<PathBuf, crate::Error> {
        Self::require(&self.paths.vocab, "vocab", command)
    }

    pub fn features_path(&self, command: &str) -> Result<PathBuf, crate::Error> {
        Self::require(&self.paths.features, "features", command)
    }

    pub fn train_pairs_path(&self, command: &str) -> Result<PathBuf, crate::Error> {
        Self::require(&self.paths.train_pairs, "train-pairs", command)
    }

    pub fn pool_path(&self, command: &str) -> Result<PathBuf, crate::Error> {
        Self::require(&self.paths.pool, "pool", command)
    }

    pub fn checkpoint_path(&self, command: &str) -> Result<PathBuf, crate::Error> {
        Self::require(&self.paths.checkpoint, "checkpoint", command)
    }

    /// Seed is mandatory for training; there is no wall-clock fallback.
    pub fn train_seed(&self) -> Result<u64, crate::Error> {
        self.optim
            .seed
            .ok_or_else(|| crate::Error::Config("training requires an explicit --seed".into()))
    }

    /// Shared validation: steps and batch sizes positive, the checkpoint
    /// output distinct from every input path.
    pub fn validate_for_train(&self) -> Result<(), crate::Error> {
        if self.optim.steps == 0 {
            return Err(crate::Error::Config("steps must be at least 1".into()));
        }
        if self.optim.batch_size == 0 {
            return Err(crate::Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.optim.lr > 0.0) {
            return Err(crate::Error::Config("lr must be positive".into()));
        }
        if let Some(ckpt) = &self.paths.checkpoint {
            let inputs = [
                self.paths.vocab.as_ref(),
                self.paths.features.as_ref(),
                self.paths.train_pairs.as_ref(),
                self.paths.pool.as_ref(),
                self.init_checkpoint.as_ref(),
            ];
            for input in inputs.into_iter().flatten() {
                if input == ckpt {
                    return Err(crate::Error::Config(format!(
                        "checkpoint output {} collides with an input path",
                        ckpt.display()
                    )));
                }
            }
            for eval in &self.paths.eval_pairs {
                if eval == ckpt {
                    return Err(crate::Error::Config(format!(
                        "checkpoint output {} collides with an eval set",
                        ckpt.display()
                    )));
                }
            }
        }
        Ok(())
    }
}
