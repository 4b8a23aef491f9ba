//! Attention cost against sequence length: counted FLOPs, wall time and
//! tape memory for every mechanism, with fitted log-log slopes.
//!
//! ```bash
//! cargo run --release -p rsir --example complexity_bench
//! ```

use rsir::attention::Mechanism;
use rsir::backbone::ModelConfig;
use rsir::harness::bench::{bench, loglog_slope, BenchMode};

fn main() -> rsir::Result<()> {
    let lengths = [64, 256, 1024, 4096];
    let rows = bench(&ModelConfig::desk(), &lengths, &Mechanism::ALL, BenchMode::Timed { reps: 3 })?;
    println!("{:>5} {:>7} {:>12} {:>12} {:>10} {:>12}", "L", "mech", "flops", "score", "ms", "bytes");
    for r in &rows {
        println!(
            "{:>5} {:>7} {:>12} {:>12} {:>10.3} {:>12}",
            r.tokens,
            r.mechanism.name(),
            r.flops,
            r.score_flops,
            r.wall_ms.unwrap_or(f64::NAN),
            r.peak_bytes.unwrap_or(0)
        );
    }
    for mech in Mechanism::ALL {
        let pts: Vec<_> = rows
            .iter()
            .filter(|r| r.mechanism == mech)
            .map(|r| (r.tokens as f64, r.score_flops as f64))
            .collect();
        println!("{:7} score-FLOP slope {:.3}", mech.name(), loglog_slope(&pts));
    }
    Ok(())
}
