use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::attention::ForwardCtx;
use crate::backbone::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{Element, Tape};

use super::checkpoint::{copy_params, Checkpoint, CheckpointMeta};
use super::config::RunConfig;
use super::data::{Dataset, EpochPlan, Normalization};
use super::metrics::{write_metrics, MetricsRow, Split};
use super::optim::AdamW;
use super::schedule::cosine_lr;

// Stream ids for `SeedRng::fork`. Every stochastic choice in a run is a pure
// function of (seed, purpose, epoch), which is what makes resume exact.
const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1 << 32;
const STREAM_TRAIN: u64 = 2 << 32;
const STREAM_EVAL: u64 = 3 << 32;

pub const LAST_CHECKPOINT: &str = "last.bin";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.bin")
}

/// Generator for the RS-Win plans of evaluation after `epoch`.
pub fn eval_rng(root: &SeedRng, eval_seed: Option<u64>, epoch: usize) -> SeedRng {
    match eval_seed {
        Some(s) => SeedRng::new(s),
        None => root.fork(STREAM_EVAL + epoch as u64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub top1: f64,
    pub samples: usize,
}

/// Mean loss and top-1 over `data` in natural order.
pub fn evaluate<T: Element>(model: &Model<T>, data: &Dataset, batch_size: usize, rng: SeedRng) -> Result<EvalReport> {
    let mut ctx = ForwardCtx::new(rng);
    let (mut loss, mut correct) = (0.0, 0usize);
    for (idx, flips) in EpochPlan::new(data.len(), batch_size, None, false).batches {
        let (images, labels) = data.batch::<T>(&idx, &flips);
        let tape = Tape::new();
        let logits = model.forward(tape.constant(images), &mut ctx)?;
        correct += count_correct(&logits.to_tensor(), &labels);
        loss += logits.cross_entropy(&labels)?.value().item().to_f64().unwrap() * labels.len() as f64;
    }
    let n = data.len().max(1) as f64;
    Ok(EvalReport {
        loss: loss / n,
        top1: correct as f64 / n,
        samples: data.len(),
    })
}

fn count_correct<T: Element>(logits: &crate::tensor::Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            // First maximum wins ties.
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == y
        })
        .count()
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: Vec<MetricsRow>,
    pub checkpoint: PathBuf,
    pub model: Model<f32>,
}

struct Run {
    cfg: RunConfig,
    model_cfg: ModelConfig,
    root: SeedRng,
    train: Dataset,
    eval: Option<Dataset>,
    norm: Normalization,
}

impl Run {
    fn new(cfg: &RunConfig, norm: Option<&Normalization>) -> Result<Self> {
        cfg.validate()?;
        let model_cfg = cfg.model_config()?;
        let mut train = Dataset::load(&cfg.train_data)?;
        if train.is_empty() {
            return Err(Error::Config(format!("training set `{}` is empty", cfg.train_data)));
        }
        let norm = train.prepare(&model_cfg, norm)?;
        let eval = match &cfg.eval_data {
            Some(spec) => {
                let mut d = Dataset::load(spec)?;
                d.prepare(&model_cfg, Some(&norm))?;
                Some(d)
            }
            None => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            model_cfg,
            root: SeedRng::new(cfg.seed),
            train,
            eval,
            norm,
        })
    }

    fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.cfg.batch_size) as u64
    }
}

/// Train from scratch. `log` sees every metrics row as it is produced.
pub fn train(cfg: &RunConfig, log: &mut dyn FnMut(&MetricsRow)) -> Result<RunOutcome> {
    let run = Run::new(cfg, None)?;
    let model = Model::<f32>::new(run.model_cfg.clone(), &mut run.root.fork(STREAM_INIT))?;
    let optim = AdamW::new(cfg.adamw(), &model.store);
    execute(run, model, optim, 0, Vec::new(), log)
}

/// Continue a run from a checkpoint written by [`train`] with the same
/// config. The result is bitwise identical to an uninterrupted run.
pub fn resume(cfg: &RunConfig, checkpoint: &Path, log: &mut dyn FnMut(&MetricsRow)) -> Result<RunOutcome> {
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    let run = Run::new(cfg, ck.meta.normalization.as_ref())?;
    if ck.meta.model != run.model_cfg {
        return Err(Error::Checkpoint("model config differs from the checkpoint's".into()));
    }
    if ck.meta.rng != run.root.state() {
        return Err(Error::Checkpoint("run seed differs from the checkpoint's".into()));
    }
    let mut model = Model::<f32>::new(run.model_cfg.clone(), &mut run.root.fork(STREAM_INIT))?;
    copy_params(&mut model.store, &ck.params)?;
    let optim = ck
        .optim
        .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
    if optim.step != ck.meta.epoch as u64 * run.steps_per_epoch() {
        return Err(Error::Checkpoint("checkpoint step count does not match batch size and data".into()));
    }
    execute(run, model, optim, ck.meta.epoch, ck.meta.metrics, log)
}

fn execute(
    run: Run,
    mut model: Model<f32>,
    mut optim: AdamW<f32>,
    start_epoch: usize,
    mut metrics: Vec<MetricsRow>,
    log: &mut dyn FnMut(&MetricsRow),
) -> Result<RunOutcome> {
    let cfg = &run.cfg;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|source| Error::File {
        path: cfg.out_dir.clone(),
        source,
    })?;
    let steps = run.steps_per_epoch();
    let total = steps * cfg.epochs as u64;
    let warmup = steps * cfg.warmup_epochs as u64;
    let last = cfg.out_dir.join(LAST_CHECKPOINT);

    for epoch in start_epoch + 1..=cfg.epochs {
        let started = Instant::now();
        let mut data_rng = run.root.fork(STREAM_DATA + epoch as u64);
        let plan = EpochPlan::new(run.train.len(), cfg.batch_size, Some(&mut data_rng), cfg.hflip);
        let mut ctx = ForwardCtx::new(run.root.fork(STREAM_TRAIN + epoch as u64));
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0usize, 0.0);
        for (idx, flips) in &plan.batches {
            let (images, labels) = run.train.batch::<f32>(idx, flips);
            let step = || -> Result<(f64, usize)> {
                let tape = Tape::new();
                let logits = model.forward(tape.constant(images), &mut ctx)?;
                let loss = logits.cross_entropy(&labels)?;
                let value = loss.value().item() as f64;
                if !value.is_finite() {
                    return Err(Error::NonFinite("training loss".into()));
                }
                let correct = count_correct(&logits.to_tensor(), &labels);
                let grads = tape.backward(loss)?;
                model.store.zero_grad();
                model.store.accumulate(&tape, &grads);
                Ok((value, correct))
            };
            // Divergence can first surface anywhere in the step; report it
            // against the last checkpoint that is known to be good.
            let diverged = |what: String, step: u64| {
                write_metrics(&cfg.out_dir, &metrics)?;
                Err(Error::NonFinite(format!(
                    "{what} at epoch {epoch}, step {}; last good checkpoint kept at {}",
                    step + 1,
                    last.display()
                )))
            };
            let (value, n_correct) = match step() {
                Ok(v) => v,
                Err(Error::NonFinite(what)) => return diverged(what, optim.step),
                Err(e) => return Err(e),
            };
            correct += n_correct;
            loss_sum += value * labels.len() as f64;
            lr = cosine_lr(optim.step, total, warmup, cfg.base_lr);
            let at = optim.step;
            match optim.step(&mut model.store, lr) {
                Err(Error::NonFinite(what)) => return diverged(what, at),
                r => r?,
            }
        }
        let n = run.train.len() as f64;
        let row = MetricsRow {
            epoch,
            split: Split::Train,
            loss: loss_sum / n,
            top1: correct as f64 / n,
            lr,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log(&row);
        metrics.push(row);
        if let Some(eval) = &run.eval {
            let started = Instant::now();
            let r = evaluate(&model, eval, cfg.batch_size, eval_rng(&run.root, cfg.eval_seed, epoch))?;
            let row = MetricsRow {
                epoch,
                split: Split::Eval,
                loss: r.loss,
                top1: r.top1,
                lr,
                wall_seconds: started.elapsed().as_secs_f64(),
            };
            log(&row);
            metrics.push(row);
        }
        write_metrics(&cfg.out_dir, &metrics)?;
        let ck = Checkpoint {
            meta: CheckpointMeta {
                model: run.model_cfg.clone(),
                // Where the files live is not part of the run.
                run: Some(RunConfig {
                    out_dir: PathBuf::new(),
                    ..cfg.clone()
                }),
                epoch,
                step: optim.step,
                rng: run.root.state(),
                normalization: Some(run.norm.clone()),
                metrics: metrics.clone(),
            },
            params: model.store.clone(),
            optim: Some(optim.clone()),
        };
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            ck.save(&cfg.out_dir.join(epoch_checkpoint_name(epoch)))?;
        }
        ck.save(&last)?;
    }
    if start_epoch >= cfg.epochs {
        write_metrics(&cfg.out_dir, &metrics)?;
    }
    Ok(RunOutcome {
        metrics,
        checkpoint: last,
        model,
    })
}

/// Rebuild the model stored in a checkpoint.
pub fn load_model(ck: &Checkpoint<f32>) -> Result<Model<f32>> {
    let mut model = Model::<f32>::new(ck.meta.model.clone(), &mut SeedRng::new(0))?;
    copy_params(&mut model.store, &ck.params)?;
    Ok(model)
}

/// Evaluate a checkpoint on a data spec, standardized with the run's
/// training statistics.
pub fn evaluate_checkpoint(path: &Path, data: &str, eval_seed: Option<u64>, batch_size: usize) -> Result<EvalReport> {
    let ck = Checkpoint::<f32>::load(path)?;
    let model = load_model(&ck)?;
    let mut d = Dataset::load(data)?;
    d.prepare(&ck.meta.model, ck.meta.normalization.as_ref())?;
    let root = SeedRng::from_state(&ck.meta.rng)?;
    evaluate(&model, &d, batch_size, eval_rng(&root, eval_seed, ck.meta.epoch))
}
