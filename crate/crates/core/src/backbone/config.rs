use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};

/// Merges between stages; each halves the token grid side.
pub const NUM_MERGES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub depth: usize,
    pub dim: usize,
    pub num_heads: usize,
    /// Tokens per attention window.
    pub window_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default = "default_true")]
    pub qkv_bias: bool,
    pub stages: Vec<StageConfig>,
}

fn default_patch() -> usize {
    4
}
fn default_in_channels() -> usize {
    3
}
fn default_mlp_ratio() -> f64 {
    4.0
}
fn default_true() -> bool {
    true
}

impl ModelConfig {
    fn variant(dim: usize, depths: [usize; 4], heads: [usize; 4]) -> Self {
        Self {
            image_size: 224,
            patch_size: 4,
            in_channels: 3,
            num_classes: 1000,
            mlp_ratio: 4.0,
            qkv_bias: true,
            stages: (0..4)
                .map(|i| StageConfig {
                    depth: depths[i],
                    dim: dim << i,
                    num_heads: heads[i],
                    window_size: 49,
                })
                .collect(),
        }
    }

    /// RSIR-T: C = 64, blocks 2-2-16-2, heads 4-4-8-16.
    pub fn rsir_tiny() -> Self {
        Self::variant(64, [2, 2, 16, 2], [4, 4, 8, 16])
    }

    /// RSIR-B: C = 96, blocks 2-4-24-2, heads 4-8-16-32.
    pub fn rsir_base() -> Self {
        Self::variant(96, [2, 4, 24, 2], [4, 8, 16, 32])
    }

    /// 32×32 model for CPU training runs. Stage 4 holds a single token, so
    /// its window is 1.
    pub fn desk() -> Self {
        let windows = [4, 4, 4, 1];
        let depths = [1, 1, 2, 1];
        let heads = [2, 2, 4, 4];
        Self {
            image_size: 32,
            patch_size: 4,
            in_channels: 3,
            num_classes: 10,
            mlp_ratio: 4.0,
            qkv_bias: true,
            stages: (0..4)
                .map(|i| StageConfig {
                    depth: depths[i],
                    dim: 16 << i,
                    num_heads: heads[i],
                    window_size: windows[i],
                })
                .collect(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "rsir-t" | "tiny" => Some(Self::rsir_tiny()),
            "rsir-b" | "base" => Some(Self::rsir_base()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("model config serializes")
    }

    /// A preset name or a path to a TOML file.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(cfg) = Self::preset(spec) {
            return Ok(cfg);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        (dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn final_dim(&self) -> usize {
        self.stages.last().map(|s| s.dim).unwrap_or(0)
    }

    /// Token grid side of every stage at `resolution` pixels.
    pub fn grid_sides(&self, resolution: usize) -> Vec<usize> {
        (0..self.stages.len())
            .map(|i| resolution / self.patch_size >> i)
            .collect()
    }

    pub fn attention_config(&self, stage: usize) -> Result<AttentionConfig> {
        let s = &self.stages[stage];
        AttentionConfig::new(s.dim, s.num_heads, s.window_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_for(self.image_size)?;
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config("num_classes and in_channels must be positive".into()));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return Err(Error::Config(format!("mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        Ok(())
    }

    /// Structural checks plus window divisibility at `resolution`.
    pub fn validate_for(&self, resolution: usize) -> Result<()> {
        if self.stages.len() != NUM_MERGES + 1 {
            return Err(Error::Config(format!("expected 4 stages, got {}", self.stages.len())));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        let stride = self.patch_size << NUM_MERGES;
        if resolution == 0 || resolution % stride != 0 {
            return Err(Error::Config(format!(
                "resolution {resolution} is not divisible by {stride}"
            )));
        }
        for (i, pair) in self.stages.windows(2).enumerate() {
            if pair[1].dim != 2 * pair[0].dim {
                return Err(Error::Config(format!(
                    "stage {} dim {} must double stage {} dim {}",
                    i + 2,
                    pair[1].dim,
                    i + 1,
                    pair[0].dim
                )));
            }
        }
        for (i, (stage, side)) in self.stages.iter().zip(self.grid_sides(resolution)).enumerate() {
            AttentionConfig::new(stage.dim, stage.num_heads, stage.window_size)
                .map_err(|e| Error::Config(format!("stage {}: {e}", i + 1)))?;
            let tokens = side * side;
            if tokens % stage.window_size != 0 {
                return Err(Error::Config(format!(
                    "stage {}: window {} does not divide {} tokens",
                    i + 1,
                    stage.window_size,
                    tokens
                )));
            }
        }
        Ok(())
    }
}
