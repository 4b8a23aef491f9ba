//! One RSIR-Win layer next to the single-strategy and dense variants.
//!
//! ```bash
//! cargo run -p rsir --example rsir_attention
//! ```

use rsir::attention::{
    attention_layer, AttentionConfig, AttentionWeights, ForwardCtx, Mechanism, Projection, QkvProjection,
};
use rsir::{SeedRng, Tape, Tensor};

fn main() -> rsir::Result<()> {
    let (len, dim, heads, window) = (16, 8, 2, 4);
    let cfg = AttentionConfig::new(dim, heads, window)?;
    let mut rng = SeedRng::new(1);
    let tape = Tape::<f64>::new();
    let mut proj = || {
        Projection::new(
            tape.leaf(Tensor::randn(&[dim, dim], 0.3, &mut rng)),
            Some(tape.leaf(Tensor::zeros(&[dim]))),
        )
    };
    let weights = AttentionWeights {
        qkv: QkvProjection {
            q: proj(),
            k: proj(),
            v: proj(),
        },
        out: proj(),
    };
    let x = tape.leaf(Tensor::randn(&[1, len, dim], 1.0, &mut SeedRng::new(2)));

    let mut ctx = ForwardCtx::traced(SeedRng::new(3));
    let dense = attention_layer(Mechanism::Dense, x, &weights, &cfg, &mut ctx)?.to_tensor();
    for mech in [Mechanism::RsWin, Mechanism::IrWin, Mechanism::Rsir] {
        let y = attention_layer(mech, x, &weights, &cfg, &mut ctx)?;
        println!(
            "{:7} output {:?}  max |y - dense| = {:.4}",
            mech.name(),
            y.shape(),
            y.to_tensor().max_abs_diff(&dense)
        );
    }
    for r in ctx.take_trace() {
        println!("{:?} windows {:?}", r.head_group, r.window_assignment[0]);
    }

    // With a single window spanning every token, each variant is dense attention.
    let global = AttentionConfig::new(dim, heads, len)?;
    let y = attention_layer(Mechanism::Rsir, x, &weights, &global, &mut ctx)?;
    println!("w = L: rsir vs dense max error {:e}", y.to_tensor().max_abs_diff(&dense));
    Ok(())
}
