use std::path::Path;
use std::process::Command;

use rsir::attention::HeadGroup;
use rsir::backbone::{Model, ModelConfig};
use rsir::harness::checkpoint::Checkpoint;
use rsir::harness::metrics::{read_metrics, MetricsRow, Split};
use rsir::harness::train::{evaluate_checkpoint, load_model, LAST_CHECKPOINT};
use rsir::harness::data::synthetic;
use rsir::harness::{idx, inspect, resume, train, Dataset, InspectDump, RunConfig, SyntheticTask};
use rsir::{Error, SeedRng, Tensor};

fn small_run(out: &Path, epochs: usize) -> RunConfig {
    RunConfig {
        epochs,
        batch_size: 32,
        warmup_epochs: 0,
        num_classes: Some(2),
        out_dir: out.into(),
        ..RunConfig::desk("synthetic:two-blobs:train:96", Some("synthetic:two-blobs:eval:64"))
    }
}

#[test]
fn idx_files_load_through_a_data_spec() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = (dir.path().join("img.idx"), dir.path().join("lbl.idx"));
    let data = synthetic(SyntheticTask::Digits, true, 20);
    data.write_idx(&images, &labels).unwrap();
    let back = Dataset::load(&format!("idx:{},{}", images.display(), labels.display())).unwrap();
    assert_eq!(back.len(), 20);
    assert_eq!(back.labels, data.labels);
    assert_eq!((back.channels, back.height, back.width), (1, 28, 28));
    // Pixels are quantized to bytes on disk.
    for (a, b) in back.images.iter().zip(&data.images) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn corrupt_idx_reports_the_offset() {
    let good = idx::encode(&[2, 3], &[1, 2, 3, 4, 5, 6]);
    assert_eq!(idx::parse(&good).unwrap().dims, vec![2, 3]);
    let offset = |bytes: &[u8]| match idx::parse(bytes) {
        Err(Error::Idx { offset, .. }) => offset,
        other => panic!("expected an IDX error, got {other:?}"),
    };
    let mut bad_magic = good.clone();
    bad_magic[0] = 1;
    assert_eq!(offset(&bad_magic), 0);
    let mut bad_type = good.clone();
    bad_type[2] = 0x0D;
    assert_eq!(offset(&bad_type), 2);
    // Truncation is reported where the bytes ran out.
    assert_eq!(offset(&good[..6]), 6);
    assert_eq!(offset(&good[..good.len() - 2]), 16);
}

/// Mean intensity alone separates the two classes, so a one-feature logistic
/// regression is an independent check that the task is learnable.
#[test]
fn two_blobs_is_separable_by_a_linear_probe() {
    let feature = |d: &Dataset, i: usize| d.image(i).iter().map(|&v| v as f64).sum::<f64>() / d.image_len() as f64;
    let train_set = synthetic(SyntheticTask::TwoBlobs, false, 512);
    let eval_set = synthetic(SyntheticTask::TwoBlobs, true, 256);
    let xs: Vec<f64> = (0..train_set.len()).map(|i| feature(&train_set, i)).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
    let (mut w, mut b) = (0.0, 0.0);
    for _ in 0..500 {
        let (mut gw, mut gb) = (0.0, 0.0);
        for (x, &y) in xs.iter().zip(&train_set.labels) {
            let z = (x - mean) / std;
            let p = 1.0 / (1.0 + (-(w * z + b)).exp());
            gw += (p - y as f64) * z;
            gb += p - y as f64;
        }
        w -= gw / xs.len() as f64;
        b -= gb / xs.len() as f64;
    }
    let correct = (0..eval_set.len())
        .filter(|&i| {
            let z = (feature(&eval_set, i) - mean) / std;
            ((w * z + b > 0.0) as usize) == eval_set.labels[i]
        })
        .count();
    assert!(correct as f64 / eval_set.len() as f64 >= 0.99, "{correct}/{}", eval_set.len());
}

#[test]
fn constant_input_gives_identity_importance_plans() {
    let model = Model::<f32>::new(ModelConfig::desk(), &mut SeedRng::new(0)).unwrap();
    let dump = inspect(&model, Tensor::full(&[1, 3, 32, 32], 0.25), 0, "constant", 0).unwrap();
    let first = dump.records.iter().find(|r| r.head_group == HeadGroup::Ir).unwrap();
    let l = first.ids_shuffle[0].len();
    assert_eq!(first.ids_shuffle[0], (0..l).collect::<Vec<_>>());
    let w = ModelConfig::desk().stages[0].window_size;
    assert_eq!(first.window_assignment[0], (0..l).map(|t| t / w).collect::<Vec<_>>());
}

#[test]
fn inspect_dump_is_seeded_and_round_trips() {
    let cfg = ModelConfig::desk();
    let model = Model::<f32>::new(cfg.clone(), &mut SeedRng::new(0)).unwrap();
    let image = rsir::harness::inspect::load_input("synthetic:two-blobs:eval:4", 1, &cfg, None).unwrap();
    let a = inspect(&model, image.clone(), 1, "synthetic:two-blobs:eval:4", 1).unwrap();
    let b = inspect(&model, image.clone(), 2, "synthetic:two-blobs:eval:4", 1).unwrap();
    assert_eq!(a, inspect(&model, image, 1, "synthetic:two-blobs:eval:4", 1).unwrap());
    let pick = |d: &InspectDump, g: HeadGroup| {
        d.records
            .iter()
            .find(|r| r.layer == "stage1.block0" && r.head_group == g)
            .unwrap()
            .clone()
    };
    assert_eq!(pick(&a, HeadGroup::Ir), pick(&b, HeadGroup::Ir));
    assert_ne!(pick(&a, HeadGroup::Rs).ids_shuffle, pick(&b, HeadGroup::Rs).ids_shuffle);

    let json = a.to_json();
    assert_eq!(InspectDump::from_json(&json).unwrap(), a);
    let extra = json.replacen("\"seed\"", "\"colour\": 1,\n  \"seed\"", 1);
    assert!(InspectDump::from_json(&extra).is_err());
    let future = json.replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
    assert!(InspectDump::from_json(&future).is_err());
}

#[test]
fn divergence_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), 1);
    train(&cfg, &mut |_| {}).unwrap();
    let last = dir.path().join(LAST_CHECKPOINT);
    let before = std::fs::read(&last).unwrap();

    let hot = RunConfig {
        epochs: 3,
        base_lr: 1e30,
        ..cfg
    };
    let err = resume(&hot, &last, &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert!(err.to_string().contains(LAST_CHECKPOINT), "{err}");
    let after = std::fs::read(&last).unwrap();
    // Epoch 2 may complete before the loss blows up; either way the file on
    // disk is a whole, loadable checkpoint with finite weights.
    let ck = Checkpoint::<f32>::from_bytes(&after).unwrap();
    assert!(ck.params.iter().all(|(_, p)| p.value.data().iter().all(|v| v.is_finite())));
    assert!(ck.meta.epoch >= 1);
    if ck.meta.epoch == 1 {
        assert_eq!(before, after);
    }
}

#[test]
fn checkpoint_evaluation_matches_the_training_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), 2);
    let out = train(&cfg, &mut |_| {}).unwrap();
    let logged = out.metrics.iter().rev().find(|r| r.split == Split::Eval).unwrap();
    let r = evaluate_checkpoint(&out.checkpoint, cfg.eval_data.as_deref().unwrap(), None, cfg.batch_size).unwrap();
    assert_eq!((r.loss, r.top1), (logged.loss, logged.top1));
    let untimed: Vec<_> = out
        .metrics
        .iter()
        .map(|r| MetricsRow {
            wall_seconds: 0.0,
            ..r.clone()
        })
        .collect();
    assert_eq!(read_metrics(&dir.path().join("metrics.csv")).unwrap(), untimed);
    let ck = Checkpoint::<f32>::load(&out.checkpoint).unwrap();
    assert_eq!(load_model(&ck).unwrap().param_count(), out.model.param_count());
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    let base = "epochs = 1\ntrain_data = \"synthetic:digits\"\n";
    assert!(RunConfig::from_toml(base).is_ok());
    assert!(RunConfig::from_toml(&format!("{base}learning_rate = 0.1\n")).is_err());
    assert!(RunConfig::from_toml(&format!("{base}batch_size = 0\n")).is_err());
    assert!(Dataset::load("synthetic:cats").is_err());
    assert!(Dataset::load("synthetic:digits:test").is_err());
}

#[test]
fn cli_runs_every_subcommand() {
    let exe = env!("CARGO_BIN_EXE_rsir");
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(exe).args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let cfg = small_run(&dir.path().join("run"), 1);
    let config = dir.path().join("run.toml");
    std::fs::write(&config, cfg.to_toml()).unwrap();
    let config = config.to_str().unwrap();
    run(&["train", "--config", config]);
    let ck = dir.path().join("run").join(LAST_CHECKPOINT);
    let ck = ck.to_str().unwrap();
    let eval = run(&["eval", "--checkpoint", ck, "--data", "synthetic:two-blobs:eval:64", "--batch-size", "32"]);
    let eval: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert!(eval["top1"].as_f64().is_some());

    let bench = dir.path().join("bench.csv");
    run(&["bench", "--config", "desk", "--mode", "analytic", "--resolutions", "64,256", "--out", bench.to_str().unwrap()]);
    assert_eq!(rsir::harness::bench::read_csv(&bench).unwrap().len(), 8);

    let dump = dir.path().join("dump.json");
    run(&["inspect", "--checkpoint", ck, "--input", "synthetic:two-blobs:eval:4", "--out", dump.to_str().unwrap()]);
    InspectDump::from_json(&std::fs::read_to_string(&dump).unwrap()).unwrap();

    let bad = Command::new(exe).args(["train", "--config", "/nonexistent.toml"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error:"));
}
