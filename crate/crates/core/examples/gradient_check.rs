//! Finite-difference check of every parameter in one RSIR block.
//!
//! ```bash
//! cargo run --release -p rsir --example gradient_check
//! ```

use rsir::attention::{AttentionConfig, ForwardCtx};
use rsir::backbone::RsirBlock;
use rsir::tensor::gradcheck::GradCheck;
use rsir::{ParamStore, SeedRng, Tape, Tensor};

fn main() -> rsir::Result<()> {
    // C = 16, K = 2, L = 16 tokens, w = 4, MLP width 64.
    let attn = AttentionConfig::new(16, 2, 4)?;
    let mut store = ParamStore::<f64>::new();
    let block = RsirBlock::new(&mut store, "block", attn, 64, true, &mut SeedRng::new(0))?;
    // Non-trivial norms and biases so every gradient path is exercised.
    let mut rng = SeedRng::new(9);
    for p in store.iter_mut() {
        let noise = Tensor::randn(p.value.shape(), 0.1, &mut rng);
        p.value = Tensor::new(p.value.shape(), p.value.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect())?;
    }
    let x = Tensor::<f64>::randn(&[1, 16, attn.dim()], 1.0, &mut SeedRng::new(1));
    let probe = Tensor::<f64>::randn(&[1, 16, attn.dim()], 1.0, &mut SeedRng::new(2));

    let loss = |store: &ParamStore<f64>, grads: bool| -> (f64, Vec<Tensor<f64>>) {
        let tape = Tape::new();
        // Same RS plan on every evaluation.
        let mut ctx = ForwardCtx::seeded(5);
        let y = block.forward(tape.constant(x.clone()), store, &mut ctx).unwrap();
        let l = y.mul(&tape.constant(probe.clone())).unwrap().sum();
        let value = l.value().item();
        if !grads {
            return (value, vec![]);
        }
        let g = tape.backward(l).unwrap();
        let mut s = store.clone();
        s.zero_grad();
        s.accumulate(&tape, &g);
        (value, s.iter().map(|(_, p)| p.grad.clone()).collect())
    };
    let (_, analytic) = loss(&store, true);
    let report = GradCheck::default().params(&mut store, &analytic, |s| loss(s, false).0);
    println!(
        "checked {} scalars, max rel err {:.2e} ({:.2e} before discounting round-off), worst {:?}",
        report.checked, report.max_rel_err, report.max_raw_rel_err, report.worst
    );
    Ok(())
}
