//! Run configuration: training hyperparameters, corpus layout, default
//! paths. A [`RunConfigFile`] is the JSON document the CLI consumes; unknown
//! keys are rejected so typos fail loudly.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Mask synthesis policy for the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskPolicy {
    /// Axis-centered square covering roughly `fraction` of the pixels.
    Center { fraction: f64 },
    /// Union of 1–4 random rectangles, resampled until the missing fraction
    /// lands in [0.2, 0.5].
    Random,
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the adversarial term in the combined loss.
    pub lambda_adv: f64,
    pub learning_rate: f64,
    /// Number of mixture primitives.
    pub k: usize,
    /// Latent dimension d.
    pub latent_dim: usize,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Emit one JSON loss record every this many steps.
    pub log_every: usize,
    /// Write a checkpoint every this many steps (and at the end).
    pub checkpoint_every: usize,
    /// Variant: decode and penalize every primitive's completion each step
    /// instead of only the selected one. Off by default.
    pub decode_all_primitives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_adv: 0.05,
            learning_rate: 1e-4,
            k: 4,
            latent_dim: 16,
            batch: 16,
            steps: 20_000,
            seed: 7,
            log_every: 50,
            checkpoint_every: 5_000,
            decode_all_primitives: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_adv < 0.0 {
            return Err(Error::Config("lambda_adv must be >= 0".into()));
        }
        if self.k < 1 || self.latent_dim < 1 || self.batch < 1 {
            return Err(Error::Config(
                "k, latent_dim and batch must all be >= 1".into(),
            ));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "log_every and checkpoint_every must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Synthetic corpus layout: sizes, mode structure, mask policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_test: usize,
    /// Number of ground-truth completion modes M.
    pub modes: usize,
    /// Probability of each mode; must sum to 1.
    pub mode_probs: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub mask: MaskPolicy,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_train: 4096,
            n_test: 256,
            modes: 4,
            mode_probs: vec![0.25; 4],
            height: 32,
            width: 32,
            channels: 1,
            mask: MaskPolicy::Center { fraction: 0.25 },
            seed: 11,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modes < 2 {
            return Err(Error::Config("modes must be >= 2".into()));
        }
        if self.mode_probs.len() != self.modes {
            return Err(Error::Config(format!(
                "mode_probs has {} entries but modes = {}",
                self.mode_probs.len(),
                self.modes
            )));
        }
        let sum: f64 = self.mode_probs.iter().sum();
        if self.mode_probs.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mode_probs must be non-negative and sum to 1 (sum = {sum})"
            )));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height < 8 || self.width < 8 {
            return Err(Error::Config(
                "height and width must be multiples of 4, at least 8".into(),
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config("channels must be 1 or 3".into()));
        }
        if let MaskPolicy::Center { fraction } = self.mask {
            if !(fraction > 0.0 && fraction <= 0.9) {
                return Err(Error::Config(format!(
                    "center mask fraction must lie in (0, 0.9], got {fraction}"
                )));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_test
    }
}

/// Default output locations; CLI flags override these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunPaths {
    pub data_dir: String,
    pub checkpoint: String,
    pub log: String,
    pub report: String,
}

impl Default for RunPaths {
    fn default() -> Self {
        RunPaths {
            data_dir: "corpus".into(),
            checkpoint: "model.ckpt".into(),
            log: "train.jsonl".into(),
            report: "eval.json".into(),
        }
    }
}

/// The on-disk run configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
    pub paths: RunPaths,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfigFile =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.corpus.validate()
    }
}
