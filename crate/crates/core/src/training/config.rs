use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamGroup;
use crate::routers::RouterSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Final learning rate of the cosine decay, as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Parameter groups excluded from optimization.
    pub freeze_sets: Vec<ParamGroup>,
    pub eval_every: usize,
    pub log_every: usize,
    /// Cap on validation tokens per periodic evaluation; `None` uses the whole split.
    pub eval_max_tokens: Option<usize>,
    pub corpus_path: PathBuf,
    /// Train / val / test fractions of the corpus, in stream order.
    pub splits: [f64; 3],
    /// Test tokens recorded in the routing dump written after training.
    pub dump_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            lr: 7e-4,
            warmup_steps: 300,
            min_lr_ratio: 0.1,
            seed: 0,
            grad_clip: 1.0,
            freeze_sets: Vec::new(),
            eval_every: 250,
            log_every: 10,
            eval_max_tokens: None,
            corpus_path: PathBuf::from("data/corpus.txt"),
            splits: [0.9, 0.05, 0.05],
            dump_tokens: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::config(
                "warmup_steps",
                format!("{} exceeds steps = {}", self.warmup_steps, self.steps),
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("lr", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::config("min_lr_ratio", "must lie in [0, 1]"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip", "must be finite and >= 0"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be >= 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be >= 1"));
        }
        if self.splits.iter().any(|f| !(0.0..=1.0).contains(f))
            || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::config("splits", "fractions must lie in [0, 1] and sum to 1"));
        }
        if self.splits[1] == 0.0 || self.splits[2] == 0.0 {
            return Err(Error::config("splits", "val and test fractions must be > 0"));
        }
        Ok(())
    }

    pub fn clip(&self) -> Option<f64> {
        (self.grad_clip > 0.0).then_some(self.grad_clip)
    }
}

/// Everything a run needs. `router` is kept at top level so ablation
/// switches are easy to spot and override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub router: RouterSpec,
    pub output_dir: Option<PathBuf>,
    pub tags: Vec<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Model configuration with the run's router installed.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            router: self.router.clone(),
            ..self.model.clone()
        }
    }

    /// Validates everything except `vocab_size`, which training fills in.
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
