//! Closed-form parameter and FLOP counts.
//!
//! FLOPs are counted as two per multiply-accumulate of every matrix product
//! (projections, attention scores, attention-weighted values, MLPs, patch
//! embedding, merges, classifier). Elementwise ops, norms and softmax are
//! not counted.

use serde::{Deserialize, Serialize};

use crate::attention::Mechanism;
use crate::error::Result;

use super::config::ModelConfig;

pub const FLOPS_PER_MAC: u64 = 2;

pub fn linear_params(fan_in: usize, fan_out: usize, bias: bool) -> usize {
    fan_in * fan_out + if bias { fan_out } else { 0 }
}

/// Exact scalar parameter count of the model `cfg` describes.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let p = cfg.patch_size;
    let mut total = linear_params(cfg.in_channels * p * p, cfg.stages[0].dim, true);
    for (si, s) in cfg.stages.iter().enumerate() {
        if si > 0 {
            let prev = cfg.stages[si - 1].dim;
            total += 2 * 4 * prev + linear_params(4 * prev, s.dim, false);
        }
        let c = s.dim;
        let hidden = cfg.mlp_hidden(c);
        let block = 2 * c // norm1
            + 3 * linear_params(c, c, cfg.qkv_bias)
            + linear_params(c, c, true)
            + 2 * c // norm2
            + linear_params(c, hidden, true)
            + linear_params(hidden, c, true);
        total += s.depth * block;
    }
    let last = cfg.final_dim();
    total + 2 * last + linear_params(last, cfg.num_classes, true)
}

/// FLOPs of one attention layer over `len` tokens of width `dim`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionFlops {
    /// Q, K, V and output projections.
    pub projections: u64,
    /// `Q·Kᵀ` over every window and head.
    pub scores: u64,
    /// Attention weights times `V`.
    pub values: u64,
}

impl AttentionFlops {
    pub fn total(&self) -> u64 {
        self.projections + self.scores + self.values
    }
}

/// Per-sample attention-layer cost. Windowed mechanisms attend over
/// `window` tokens; dense attends over all `len`.
pub fn attention_flops(mechanism: Mechanism, len: usize, dim: usize, window: usize) -> AttentionFlops {
    let (l, c) = (len as u64, dim as u64);
    let span = match mechanism {
        Mechanism::Dense => l,
        Mechanism::RsWin | Mechanism::IrWin | Mechanism::Rsir => window as u64,
    };
    AttentionFlops {
        projections: FLOPS_PER_MAC * 4 * l * c * c,
        scores: FLOPS_PER_MAC * l * span * c,
        values: FLOPS_PER_MAC * l * span * c,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub patch_embed: u64,
    pub attn_projections: u64,
    pub attn_scores: u64,
    pub attn_values: u64,
    pub mlp: u64,
    pub merges: u64,
    pub head: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.patch_embed
            + self.attn_projections
            + self.attn_scores
            + self.attn_values
            + self.mlp
            + self.merges
            + self.head
    }

    pub fn macs(&self) -> u64 {
        self.total() / FLOPS_PER_MAC
    }
}

/// Per-image forward FLOPs at a square `resolution`.
pub fn flops_count(cfg: &ModelConfig, resolution: usize) -> Result<FlopBreakdown> {
    cfg.validate_for(resolution)?;
    let sides = cfg.grid_sides(resolution);
    let p = cfg.patch_size as u64;
    let mut f = FlopBreakdown::default();
    let l0 = (sides[0] * sides[0]) as u64;
    f.patch_embed = FLOPS_PER_MAC * l0 * (cfg.in_channels as u64 * p * p) * cfg.stages[0].dim as u64;
    for (si, s) in cfg.stages.iter().enumerate() {
        let len = sides[si] * sides[si];
        let (l, c) = (len as u64, s.dim as u64);
        if si > 0 {
            let prev = cfg.stages[si - 1].dim as u64;
            f.merges += FLOPS_PER_MAC * l * 4 * prev * c;
        }
        let a = attention_flops(Mechanism::Rsir, len, s.dim, s.window_size);
        let hidden = cfg.mlp_hidden(s.dim) as u64;
        let d = s.depth as u64;
        f.attn_projections += d * a.projections;
        f.attn_scores += d * a.scores;
        f.attn_values += d * a.values;
        f.mlp += d * FLOPS_PER_MAC * 2 * l * c * hidden;
    }
    f.head = FLOPS_PER_MAC * cfg.final_dim() as u64 * cfg.num_classes as u64;
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_linear_layer() {
        assert_eq!(linear_params(16, 16, true), 16 * 16 + 16);
        assert_eq!(linear_params(16, 16, false), 256);
    }

    #[test]
    fn doubling_window_doubles_only_attention_terms() {
        let a = attention_flops(Mechanism::Rsir, 256, 32, 8);
        let b = attention_flops(Mechanism::Rsir, 256, 32, 16);
        assert_eq!(b.projections, a.projections);
        assert_eq!(b.scores, 2 * a.scores);
        assert_eq!(b.values, 2 * a.values);
        assert_eq!(a.scores, 2 * 256 * 8 * 32);
    }

    #[test]
    fn dense_scores_quadratic_windowed_linear() {
        let d = |l| attention_flops(Mechanism::Dense, l, 64, 16).scores;
        let r = |l| attention_flops(Mechanism::Rsir, l, 64, 16).scores;
        assert_eq!(d(1024), 16 * d(256));
        assert_eq!(r(1024), 4 * r(256));
    }

    #[test]
    fn resolution_must_suit_windows() {
        let cfg = ModelConfig::rsir_tiny();
        assert!(flops_count(&cfg, 224).is_ok());
        assert!(flops_count(&cfg, 256).is_err()); // 64² tokens, 49 ∤ 4096
        assert!(flops_count(&cfg, 100).is_err());
    }
}
