//! Train the desk model on the synthetic two-blobs task, resume it, and
//! evaluate the final checkpoint.
//!
//! ```bash
//! cargo run --release -p rsir --example train_two_blobs
//! ```

use rsir::harness::{evaluate_checkpoint, resume, train, RunConfig};

fn main() -> rsir::Result<()> {
    let out = std::env::temp_dir().join("rsir-two-blobs");
    let mut cfg = RunConfig::desk("synthetic:two-blobs:train", Some("synthetic:two-blobs:eval"));
    cfg.epochs = 5;
    cfg.warmup_epochs = 1;
    cfg.batch_size = 32;
    cfg.num_classes = Some(2);
    cfg.out_dir = out.clone();
    cfg.checkpoint_every = 2;

    let mut log = |r: &rsir::harness::MetricsRow| {
        println!("epoch {} {:?}: loss {:.4}, top1 {:.3}, lr {:.2e}", r.epoch, r.split, r.loss, r.top1, r.lr)
    };
    let full = train(&cfg, &mut log)?;

    println!("resuming from epoch 2 into a second directory");
    let mut again = cfg.clone();
    again.out_dir = out.join("resumed");
    let resumed = resume(&again, &out.join("epoch_0002.bin"), &mut log)?;
    let same = |name: &str| -> std::io::Result<bool> {
        Ok(std::fs::read(out.join(name))? == std::fs::read(again.out_dir.join(name))?)
    };
    println!("metrics.csv identical: {}", same("metrics.csv")?);
    println!("last.bin identical:    {}", same("last.bin")?);
    assert_eq!(resumed.metrics.len(), full.metrics.len());

    let r = evaluate_checkpoint(&full.checkpoint, "synthetic:two-blobs:eval", Some(0), 32)?;
    println!("eval top1 {:.3} over {} samples", r.top1, r.samples);
    Ok(())
}
