//! Attention cost sweep over sequence length.
//!
//! CSV schema (first line `# rsir-bench v1`):
//! `L,mechanism,flops,score_flops,wall_ms,peak_bytes`. `flops` is the whole
//! attention layer and `score_flops` the `Q·Kᵀ` term, both from
//! [`attention_flops`]; timing columns are empty in analytic mode.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_layer, AttentionConfig, AttentionWeights, ForwardCtx, Mechanism, Projection, QkvProjection};
use crate::backbone::{attention_flops, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{Tape, Tensor};

pub const BENCH_HEADER: &str = "# rsir-bench v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    /// Counted FLOPs only.
    Analytic,
    /// Also time `reps` forward passes and report the median.
    Timed { reps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    #[serde(rename = "L")]
    pub tokens: usize,
    pub mechanism: Mechanism,
    pub flops: u64,
    pub score_flops: u64,
    pub wall_ms: Option<f64>,
    pub peak_bytes: Option<usize>,
}

/// Sweep every mechanism over `lengths` tokens, using the width, heads and
/// window of the model's first stage.
pub fn bench(model: &ModelConfig, lengths: &[usize], mechanisms: &[Mechanism], mode: BenchMode) -> Result<Vec<BenchRow>> {
    let s = model
        .stages
        .first()
        .ok_or_else(|| Error::Config("model has no stages".into()))?;
    let cfg = AttentionConfig::new(s.dim, s.num_heads, s.window_size)?;
    let mut rows = Vec::new();
    for &len in lengths {
        if len % cfg.window_size() != 0 {
            return Err(Error::WindowDivisibility {
                len,
                window: cfg.window_size(),
            });
        }
        for &mech in mechanisms {
            let f = attention_flops(mech, len, cfg.dim(), cfg.window_size());
            let (wall_ms, peak_bytes) = match mode {
                BenchMode::Analytic => (None, None),
                BenchMode::Timed { reps } => {
                    let (ms, bytes) = time_layer(mech, len, &cfg, reps.max(1))?;
                    (Some(ms), Some(bytes))
                }
            };
            rows.push(BenchRow {
                tokens: len,
                mechanism: mech,
                flops: f.total(),
                score_flops: f.scores,
                wall_ms,
                peak_bytes,
            });
        }
    }
    Ok(rows)
}

/// Median forward time in ms and the tape's live bytes after one forward.
fn time_layer(mech: Mechanism, len: usize, cfg: &AttentionConfig, reps: usize) -> Result<(f64, usize)> {
    let mut rng = SeedRng::new(len as u64);
    let c = cfg.dim();
    let mut tensor = |shape: &[usize]| Tensor::<f32>::randn(shape, 0.02, &mut rng);
    let x = tensor(&[1, len, c]);
    let w: Vec<_> = (0..4).map(|_| (tensor(&[c, c]), tensor(&[c]))).collect();
    let mut times = Vec::with_capacity(reps);
    let mut peak = 0;
    let mut ctx = ForwardCtx::seeded(0);
    for _ in 0..reps {
        let tape = Tape::new();
        let proj = |i: usize| Projection::new(tape.constant(w[i].0.clone()), Some(tape.constant(w[i].1.clone())));
        let weights = AttentionWeights {
            qkv: QkvProjection {
                q: proj(0),
                k: proj(1),
                v: proj(2),
            },
            out: proj(3),
        };
        let input = tape.constant(x.clone());
        let t0 = Instant::now();
        let y = attention_layer(mech, input, &weights, cfg, &mut ctx)?;
        std::hint::black_box(y.value().data()[0]);
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        peak = peak.max(tape.bytes());
    }
    times.sort_by(f64::total_cmp);
    Ok((times[times.len() / 2], peak))
}

pub fn write_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    writeln!(file, "{BENCH_HEADER}")?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<BenchRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
