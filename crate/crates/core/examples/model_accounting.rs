//! Parameter and FLOP accounting for the RSIR-T, RSIR-B and desk configs.
//!
//! ```bash
//! cargo run --release -p rsir --example model_accounting
//! ```

use rsir::backbone::{flops_count, param_count, ModelConfig};

fn main() -> rsir::Result<()> {
    for (name, cfg) in [
        ("rsir-t", ModelConfig::rsir_tiny()),
        ("rsir-b", ModelConfig::rsir_base()),
        ("desk", ModelConfig::desk()),
    ] {
        let f = flops_count(&cfg, cfg.image_size)?;
        println!(
            "{name:7} {:>4}px  params {:>7.2}M  flops {:>7.3}G  (macs {:.3}G)",
            cfg.image_size,
            param_count(&cfg) as f64 / 1e6,
            f.total() as f64 / 1e9,
            f.macs() as f64 / 1e9,
        );
        println!(
            "        embed {:.3}G  proj {:.3}G  scores {:.3}G  values {:.3}G  mlp {:.3}G  merges {:.3}G  head {:.4}G",
            f.patch_embed as f64 / 1e9,
            f.attn_projections as f64 / 1e9,
            f.attn_scores as f64 / 1e9,
            f.attn_values as f64 / 1e9,
            f.mlp as f64 / 1e9,
            f.merges as f64 / 1e9,
            f.head as f64 / 1e9,
        );
    }
    Ok(())
}
