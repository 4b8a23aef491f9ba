mod common;

use rsir::attention::ForwardCtx;
use rsir::backbone::{Model, ModelConfig};
use rsir::permwin::{plan_from_map, restore, shuffle, uniform_sample_map};
use rsir::tensor::gradcheck::GradCheck;
use rsir::{SeedRng, Tape, Tensor, Var};

type OpFn = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>;

/// Check every input's gradient of `sum(op(inputs) ⊙ probe)` against
/// central differences.
fn check_op(name: &str, shapes: &[&[usize]], op: &OpFn) {
    let mut rng = SeedRng::new(name.len() as u64);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
    let out_shape = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let shape = op(&tape, &vars).shape();
        shape
    };
    let probe = Tensor::<f64>::randn(&out_shape, 1.0, &mut rng);
    let loss_of = |vals: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = op(&tape, &vars);
        let loss = y.mul(&tape.constant(probe.clone())).unwrap().sum().value().item();
        loss
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = op(&tape, &vars);
    let grads = tape.backward(y.mul(&tape.constant(probe.clone())).unwrap().sum()).unwrap();
    let gc = GradCheck::default();
    for (i, v) in vars.iter().enumerate() {
        let numeric = gc.numeric(&inputs[i], |xi| {
            let mut vals = inputs.clone();
            vals[i] = xi.clone();
            loss_of(&vals)
        });
        let report = gc.compare(&grads.wrt(*v), &numeric);
        assert!(report.max_rel_err < 1e-4, "{name} input {i}: {report:?}");
    }
}

#[test]
fn every_op_matches_finite_differences() {
    check_op("matmul", &[&[2, 3, 4], &[2, 4, 2]], &|_, v| v[0].matmul(&v[1]).unwrap());
    check_op("matmul_shared", &[&[2, 3, 4], &[4, 5]], &|_, v| v[0].matmul(&v[1]).unwrap());
    check_op("softmax", &[&[3, 5]], &|_, v| v[0].softmax(1).unwrap());
    check_op("softmax_axis0", &[&[4, 3]], &|_, v| v[0].softmax(0).unwrap());
    check_op("layer_norm", &[&[3, 6], &[6], &[6]], &|_, v| v[0].layer_norm(&v[1], &v[2], 1e-5).unwrap());
    check_op("gelu", &[&[20]], &|_, v| v[0].gelu());
    check_op("add", &[&[2, 3], &[2, 3]], &|_, v| v[0].add(&v[1]).unwrap());
    check_op("sub", &[&[2, 3], &[2, 3]], &|_, v| v[0].sub(&v[1]).unwrap());
    check_op("mul", &[&[2, 3], &[2, 3]], &|_, v| v[0].mul(&v[1]).unwrap());
    check_op("add_bias", &[&[2, 3, 4], &[4]], &|_, v| v[0].add_bias(&v[1]).unwrap());
    check_op("scale", &[&[5]], &|_, v| v[0].scale(-0.3));
    check_op("mean", &[&[2, 3, 4]], &|_, v| v[0].mean(1).unwrap());
    check_op("concat", &[&[2, 3, 2], &[2, 3, 3]], &|t, v| t.concat(&[v[0], v[1]], 2).unwrap());
    check_op("narrow", &[&[2, 6]], &|_, v| v[0].narrow(1, 2, 3).unwrap());
    check_op("reshape", &[&[2, 6]], &|_, v| v[0].reshape(&[3, 4]).unwrap());
    check_op("permute", &[&[2, 3, 4]], &|_, v| v[0].permute(&[2, 0, 1]).unwrap());
    check_op("transpose", &[&[3, 4]], &|_, v| v[0].transpose(0, 1).unwrap());
    check_op("gather", &[&[2, 4, 3]], &|_, v| v[0].gather_rows(&[3, 3, 0, 1, 2, 2, 1, 0], 4).unwrap());
    check_op("cross_entropy", &[&[3, 5]], &|t, v| {
        let l = v[0].cross_entropy(&[4, 0, 2]).unwrap();
        // Give the scalar a shape the probe can multiply.
        l.reshape(&[1]).unwrap().add(&t.constant(Tensor::zeros(&[1]))).unwrap()
    });
}

#[test]
fn shuffle_restore_is_identity_on_gradients() {
    let mut rng = SeedRng::new(3);
    let x = Tensor::<f64>::randn(&[3, 10, 2], 1.0, &mut rng);
    let probe = Tensor::<f64>::randn(&[3, 10, 2], 1.0, &mut rng);
    let plan = plan_from_map(&uniform_sample_map(3, 10, &mut rng).unwrap());
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = restore(shuffle(xv, &plan).unwrap(), &plan).unwrap();
    assert_eq!(y.to_tensor(), x);
    let g = tape.backward(y.mul(&tape.constant(probe.clone())).unwrap().sum()).unwrap();
    assert_eq!(g.wrt(xv), probe);
}

#[test]
fn softmax_rows_sum_to_one_at_any_magnitude() {
    let mut rng = SeedRng::new(4);
    for scale in [1e-3, 1.0, 1e2, 1e4, 1e8] {
        let x = Tensor::<f64>::randn(&[6, 9], scale, &mut rng);
        let tape = Tape::new();
        let s = tape.leaf(x).softmax(1).unwrap().to_tensor();
        for row in s.data().chunks(9) {
            assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6, "scale {scale}");
        }
    }
}

#[test]
fn full_block_matches_finite_differences() {
    let report = common::block_gradcheck();
    assert!(report.checked > 3000);
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

/// With the attention output projection and the second MLP layer zeroed,
/// each block reduces to its residual path.
#[test]
fn zeroed_sublayers_make_blocks_identity() {
    let mut model = Model::<f64>::new(ModelConfig::desk(), &mut SeedRng::new(0)).unwrap();
    for p in model.store.iter_mut() {
        if p.name.contains(".attn.wo.") || p.name.contains(".mlp.fc2.") {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
    let image = Tensor::<f64>::randn(&[2, 3, 32, 32], 1.0, &mut SeedRng::new(1));
    let tape = Tape::new();
    let (mut x, mut grid) = model.patch_embed(tape.constant(image)).unwrap();
    let mut ctx = ForwardCtx::seeded(2);
    for stage in &model.stages {
        if let Some(m) = &stage.merge {
            (x, grid) = m.forward(x, grid, &model.store).unwrap();
        }
        let input = x.to_tensor();
        for block in &stage.blocks {
            x = block.forward(x, &model.store, &mut ctx).unwrap();
        }
        assert_eq!(x.to_tensor(), input);
    }
}
