//! Analytic gradients against central finite differences in f64.

use iriskit::mobile_unet::{Model, ModelConfig, Task};
use iriskit::nn::layer::{ConvBn, ConvKind, Forward, Init, InvertedResidual, LayerSpec, ParamStore, UpConv};
use iriskit::nn::{BnMode, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::gradcheck::*;

fn run(name: &str, mut case: impl FnMut(u64) -> f64) {
    for seed in 0..INSTANCES {
        let err = case(seed);
        assert!(err < TOLERANCE, "{name} instance {seed}: relative error {err:e}");
    }
}

#[test]
fn conv2d() {
    for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
        run("conv2d", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let leaves = [
                random(&mut rng, vec![3, 6, 7], 1.0),
                random(&mut rng, vec![4, 3, 3, 3], 0.5),
                random(&mut rng, vec![4], 0.5),
            ];
            check(&leaves, seed, |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, padding).unwrap())
        });
    }
}

#[test]
fn depthwise_conv2d() {
    for stride in [1, 2] {
        run("depthwise_conv2d", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let leaves = [
                random(&mut rng, vec![3, 7, 6], 1.0),
                random(&mut rng, vec![3, 1, 3, 3], 0.5),
                random(&mut rng, vec![3], 0.5),
            ];
            check(&leaves, seed, |g, v| g.depthwise_conv2d(v[0], v[1], Some(v[2]), stride, 1).unwrap())
        });
    }
}

#[test]
fn conv_transpose2d() {
    run("conv_transpose2d", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = [
            random(&mut rng, vec![3, 4, 5], 1.0),
            random(&mut rng, vec![3, 2, 4, 4], 0.5),
            random(&mut rng, vec![2], 0.5),
        ];
        check(&leaves, seed, |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 0).unwrap())
    });
}

#[test]
fn batchnorm_both_modes() {
    for mode in [BnMode::Train, BnMode::Infer] {
        run("batchnorm", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let leaves = [
                random(&mut rng, vec![3, 4, 5], 2.0),
                random(&mut rng, vec![3], 1.5),
                random(&mut rng, vec![3], 1.0),
            ];
            let rm: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let rv: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..2.0)).collect();
            check(&leaves, seed, |g, v| g.batchnorm(v[0], v[1], v[2], &rm, &rv, mode).unwrap().0)
        });
    }
}

#[test]
fn pointwise_ops() {
    run("relu6", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check(&[away_from_kinks(&mut rng, vec![2, 4, 4])], seed, |g, v| g.relu6(v[0]).unwrap())
    });
    run("sigmoid", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check(&[random(&mut rng, vec![2, 4, 4], 4.0)], seed, |g, v| g.sigmoid(v[0]).unwrap())
    });
    run("add", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = [random(&mut rng, vec![2, 3, 3], 1.0), random(&mut rng, vec![2, 3, 3], 1.0)];
        check(&leaves, seed, |g, v| g.add(v[0], v[1]).unwrap())
    });
    run("mul", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = [random(&mut rng, vec![2, 3, 3], 1.0), random(&mut rng, vec![2, 3, 3], 1.0)];
        check(&leaves, seed, |g, v| g.mul(v[0], v[1]).unwrap())
    });
}

/// Batched `[C, N, H, W]` inputs through every kernel, so batch statistics
/// and the per-image loop strides are covered too.
#[test]
fn batched_layout() {
    run("batched conv2d", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = [
            random(&mut rng, vec![3, 2, 5, 6], 1.0),
            random(&mut rng, vec![4, 3, 3, 3], 0.5),
            random(&mut rng, vec![4], 0.5),
        ];
        check(&leaves, seed, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap())
    });
    run("batched pointwise conv2d", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = [random(&mut rng, vec![3, 3, 4, 4], 1.0), random(&mut rng, vec![2, 3, 1, 1], 0.5)];
        check(&leaves, seed, |g, v| g.conv2d(v[0], v[1], None, 1, 0).unwrap())
    });
    run("batched depthwise_conv2d", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = [random(&mut rng, vec![3, 2, 6, 5], 1.0), random(&mut rng, vec![3, 1, 3, 3], 0.5)];
        check(&leaves, seed, |g, v| g.depthwise_conv2d(v[0], v[1], None, 1, 1).unwrap())
    });
    run("batched conv_transpose2d", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves = [random(&mut rng, vec![3, 2, 3, 4], 1.0), random(&mut rng, vec![3, 2, 4, 4], 0.5)];
        check(&leaves, seed, |g, v| g.conv_transpose2d(v[0], v[1], None, 2, 1, 0).unwrap())
    });
    for mode in [BnMode::Train, BnMode::Infer] {
        run("batched batchnorm", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let leaves = [
                random(&mut rng, vec![3, 3, 3, 4], 2.0),
                random(&mut rng, vec![3], 1.5),
                random(&mut rng, vec![3], 1.0),
            ];
            let rm: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let rv: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..2.0)).collect();
            check(&leaves, seed, |g, v| g.batchnorm(v[0], v[1], v[2], &rm, &rv, mode).unwrap().0)
        });
    }
    run("batched dice_loss", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = Tensor::from_fn(vec![2, 3, 5, 5], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
        let pred = Tensor::from_fn(vec![2, 3, 5, 5], |_| rng.gen_range(0.01..0.99));
        check(&[pred], seed, |g, v| g.dice_loss(v[0], &target, 1.0).unwrap())
    });
    run("batched inverted_residual", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let spec = LayerSpec::inverted_residual(4, 4, 1, 6);
        let layer = InvertedResidual::build(&mut store, "b", spec, &mut Init::Random(&mut rng)).unwrap();
        randomize_buffers(&mut store, &mut rng);
        let x = random(&mut rng, vec![4, 2, 5, 4], 1.0);
        check_layer(&store, x, BnMode::Train, seed, |f, x| layer.forward(f, x).unwrap())
    });
}

#[test]
fn dice_loss() {
    for channels in [1, 2] {
        run("dice_loss", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let target = Tensor::from_fn(vec![channels, 6, 6], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
            let pred = Tensor::from_fn(vec![channels, 6, 6], |_| rng.gen_range(0.01..0.99));
            check(&[pred], seed, |g, v| g.dice_loss(v[0], &target, 1.0).unwrap())
        });
    }
}

#[test]
fn cross_entropy_with_logits() {
    run("bce_with_logits", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = Tensor::from_fn(vec![2, 5, 5], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
        let logits = random(&mut rng, vec![2, 5, 5], 4.0);
        check(&[logits], seed, |g, v| g.bce_with_logits(v[0], &target).unwrap())
    });
}

#[test]
fn conv_bn_layer() {
    for (kind, mode) in [
        (ConvKind::Standard, BnMode::Train),
        (ConvKind::Standard, BnMode::Infer),
        (ConvKind::Depthwise, BnMode::Train),
    ] {
        run("conv_bn", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            let (cin, cout) = if kind == ConvKind::Depthwise { (3, 3) } else { (3, 4) };
            let layer = ConvBn::build(&mut store, "l", kind, cin, cout, 3, 2, false, &mut Init::Random(&mut rng));
            randomize_buffers(&mut store, &mut rng);
            let x = random(&mut rng, vec![cin, 7, 6], 1.0);
            check_layer(&store, x, mode, seed, |f, x| layer.forward(f, x).unwrap())
        });
    }
}

#[test]
fn inverted_residual_layer() {
    for (spec, mode) in [
        (LayerSpec::inverted_residual(4, 4, 1, 6), BnMode::Train),
        (LayerSpec::inverted_residual(4, 4, 1, 6), BnMode::Infer),
        (LayerSpec::inverted_residual(3, 5, 2, 6), BnMode::Train),
        (LayerSpec::inverted_residual(4, 3, 1, 1), BnMode::Infer),
    ] {
        run("inverted_residual", |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            let layer = InvertedResidual::build(&mut store, "b", spec, &mut Init::Random(&mut rng)).unwrap();
            randomize_buffers(&mut store, &mut rng);
            let x = random(&mut rng, vec![spec.in_channels, 6, 5], 1.0);
            check_layer(&store, x, mode, seed, |f, x| layer.forward(f, x).unwrap())
        });
    }
}

#[test]
fn transposed_conv_layer() {
    run("up_conv", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let layer = UpConv::build(&mut store, "u", LayerSpec::transposed_conv(4, 3), &mut Init::Random(&mut rng)).unwrap();
        let x = random(&mut rng, vec![4, 3, 4], 1.0);
        check_layer(&store, x, BnMode::Train, seed, |f, x| layer.forward(f, x).unwrap())
    });
}

/// Wiring check end to end through the smallest valid network with the dice
/// loss on top, one probe per parameter tensor. Thousands of ReLU6 units sit
/// downstream of each weight, so the step is much finer than for single
/// layers, and the error is pooled over all probes since some gradients are
/// small enough for the finer step's rounding to matter on their own.
#[test]
fn whole_network_with_dice() {
    let mut model = Model::<f64>::build(ModelConfig::with_input_size(Task::Localization, 32), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Zero betas leave dead channels exactly on a kink.
    randomize_buffers(&mut model.store, &mut rng);
    model.store.map_all(|name, t| {
        if name.ends_with("bn.bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    });
    let store = &model.store;
    let input = random(&mut rng, vec![3, 32, 32], 1.0);
    let target = Tensor::from_fn(vec![2, 32, 32], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
    let mut leaves = store.params().to_vec();
    leaves.push(input);
    let n = store.num_params();
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let mut f = Forward::new(g, &v[..n], store, BnMode::Infer);
        let out = model.forward_graph(&mut f, v[n]).unwrap().output;
        g.dice_loss(out, &target, 1.0).unwrap()
    };
    let (_, err) = check_with(&leaves, 11, 1, 1e-6, build);
    assert!(err < TOLERANCE, "network relative error {err:e}");
}
