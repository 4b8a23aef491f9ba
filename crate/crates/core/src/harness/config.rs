use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};

use super::optim::AdamWConfig;

/// Training run settings, read from TOML.
///
/// ```toml
/// seed = 0
/// epochs = 5
/// batch_size = 32
/// warmup_epochs = 1
/// train_data = "synthetic:two-blobs:train"
/// eval_data = "synthetic:two-blobs:eval"
/// model = "desk"            # preset name or path to a model TOML
/// num_classes = 2           # optional override of the model's head
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub train_data: String,
    #[serde(default)]
    pub eval_data: Option<String>,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Pins the RS-Win plans used during evaluation.
    #[serde(default)]
    pub eval_seed: Option<u64>,
    /// Write `epoch_NNNN.bin` every this many epochs; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_true")]
    pub hflip: bool,
}

fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    0.001
}
fn default_wd() -> f64 {
    0.05
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_model() -> String {
    "desk".into()
}
fn default_out() -> PathBuf {
    "runs/latest".into()
}
fn default_true() -> bool {
    true
}

impl RunConfig {
    /// Desk-scale recipe: 30 epochs, batch 64, 2 warm-up epochs.
    pub fn desk(train_data: &str, eval_data: Option<&str>) -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 64,
            base_lr: default_lr(),
            weight_decay: default_wd(),
            warmup_epochs: 2,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            train_data: train_data.into(),
            eval_data: eval_data.map(Into::into),
            model: default_model(),
            num_classes: None,
            out_dir: default_out(),
            eval_seed: None,
            checkpoint_every: 0,
            hflip: true,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a file. A relative `model` path is resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        if ModelConfig::preset(&cfg.model).is_none() {
            let p = Path::new(&cfg.model);
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.model = dir.join(p).to_string_lossy().into_owned();
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be finite and >= 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// The model config with the optional class-count override applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::load(&self.model)?;
        if let Some(k) = self.num_classes {
            m.num_classes = k;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_validation() {
        let cfg = RunConfig::from_toml("epochs = 3\ntrain_data = \"synthetic:two-blobs\"\n").unwrap();
        assert_eq!(cfg.base_lr, 0.001);
        assert_eq!(cfg.weight_decay, 0.05);
        assert_eq!((cfg.beta1, cfg.beta2, cfg.eps), (0.9, 0.999, 1e-8));
        assert!(RunConfig::from_toml("epochs = 1\nwarmup_epochs = 2\ntrain_data = \"x\"\n").is_err());
        assert!(RunConfig::from_toml("epochs = 1\nbatch_size = 0\ntrain_data = \"x\"\n").is_err());
        assert!(RunConfig::from_toml("epochs = 1\ntrain_data = \"x\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::desk("synthetic:digits", Some("synthetic:digits:eval"));
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
