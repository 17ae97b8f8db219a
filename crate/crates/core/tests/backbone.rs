//! Residual blocks and the backbone against composed direct-convolution oracles.

mod common;

use common::{check_param_grads, naive_conv, relu, ParamLoss};
use histoswin::backbone::{
    backbone_forward, channel_project, residual_block_forward, Backbone, BackboneConfig, ChannelProjection,
    ResidualBlock,
};
use histoswin::params::{ParamRegistry, ParamSet, ParamVars};
use histoswin::tensor::Scalar;
use histoswin::{Error, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn init(reg: &ParamRegistry, seed: u64) -> ParamSet<f64> {
    reg.initialize(&mut ChaCha8Rng::seed_from_u64(seed))
}

fn run_block(block: &ResidualBlock, params: &ParamSet<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = residual_block_forward(&mut tape, xv, block, &p)?;
    Ok(tape.value(y).clone())
}

fn oracle_block(block: &ResidualBlock, params: &ParamSet<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let c1 = &block.conv1;
    let h = relu(&naive_conv(x, params.get(c1.weight), Some(params.get(c1.bias)), c1.stride, c1.padding));
    let c2 = &block.conv2;
    let h = naive_conv(&h, params.get(c2.weight), Some(params.get(c2.bias)), c2.stride, c2.padding);
    let shortcut = match &block.projection {
        Some(pr) => naive_conv(x, params.get(pr.weight), Some(params.get(pr.bias)), pr.stride, pr.padding),
        None => x.clone(),
    };
    relu(&common::add(&h, &shortcut))
}

fn zero_all(params: &mut ParamSet<f64>) {
    for t in params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn zero_branch_with_identity_shortcut_is_identity_on_nonnegative_input() {
    let mut reg = ParamRegistry::new();
    let block = ResidualBlock::register(&mut reg, "b", 4, 4, 1);
    let mut params = init(&reg, 0);
    zero_all(&mut params);
    let x = Tensor::from_fn(vec![4, 5, 5], |i| (i % 7) as f64 * 0.3);
    assert_eq!(run_block(&block, &params, &x).unwrap(), x);
}

#[test]
fn zero_input_and_biases_give_zero_output() {
    let mut reg = ParamRegistry::new();
    let block = ResidualBlock::register(&mut reg, "b", 3, 6, 2);
    let mut params = init(&reg, 1);
    for (i, name) in reg.specs().iter().map(|s| s.name.clone()).enumerate() {
        if name.ends_with("bias") {
            params.tensors_mut()[i].data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let y = run_block(&block, &params, &Tensor::zeros(vec![3, 8, 8])).unwrap();
    assert_eq!(y.shape(), &[6, 4, 4]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn random_blocks_match_composed_oracle() {
    for (seed, (c_in, c_out, stride)) in [(3, 8, 2), (4, 4, 1), (4, 6, 1), (5, 5, 2)].into_iter().enumerate() {
        let mut reg = ParamRegistry::new();
        let block = ResidualBlock::register(&mut reg, "b", c_in, c_out, stride);
        let params = init(&reg, seed as u64);
        let x = Tensor::uniform(vec![c_in, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(100 + seed as u64));
        let got = run_block(&block, &params, &x).unwrap();
        let want = oracle_block(&block, &params, &x);
        assert!(got.max_abs_diff(&want) < 1e-12, "case {seed}");
    }
}

#[test]
fn wrong_channel_count_is_a_shape_error() {
    let mut reg = ParamRegistry::new();
    let block = ResidualBlock::register(&mut reg, "b", 3, 8, 2);
    let params = init(&reg, 0);
    let r = run_block(&block, &params, &Tensor::zeros(vec![4, 8, 8]));
    assert!(matches!(r, Err(Error::Shape(_))));
}

fn run_backbone(bb: &Backbone, params: &ParamSet<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = backbone_forward(&mut tape, xv, bb, &p)?;
    Ok(tape.value(y).clone())
}

#[test]
fn stride_four_maps_64_to_16() {
    let mut reg = ParamRegistry::new();
    let bb = Backbone::register(&mut reg, &BackboneConfig::desk()).unwrap();
    let params = init(&reg, 3);
    let x = Tensor::uniform(vec![3, 64, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let y = run_backbone(&bb, &params, &x).unwrap();
    assert_eq!(y.shape(), &[32, 16, 16]);
    assert_eq!(run_backbone(&bb, &params, &x).unwrap(), y);
}

#[test]
fn backbone_equals_hand_composed_blocks() {
    let cfg = BackboneConfig {
        in_channels: 3,
        stage_channels: vec![4, 6],
        blocks_per_stage: vec![2, 1],
        stage_strides: vec![1, 2],
    };
    let mut reg = ParamRegistry::new();
    let bb = Backbone::register(&mut reg, &cfg).unwrap();
    assert_eq!(bb.blocks.len(), 3);
    let params = init(&reg, 5);
    let x = Tensor::uniform(vec![3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
    let mut h = x.clone();
    for block in &bb.blocks {
        h = run_block(block, &params, &h).unwrap();
    }
    assert_eq!(run_backbone(&bb, &params, &x).unwrap(), h);
}

#[test]
fn output_shape_over_config_grid() {
    let mut case = 0;
    for strides in [vec![1, 1], vec![2, 1], vec![2, 2], vec![1, 4]] {
        for channels in [vec![2, 3], vec![5, 5]] {
            for size in [8usize, 16] {
                let cfg = BackboneConfig {
                    in_channels: 3,
                    stage_channels: channels.clone(),
                    blocks_per_stage: vec![1, 2],
                    stage_strides: strides.clone(),
                };
                let mut reg = ParamRegistry::new();
                let bb = Backbone::register(&mut reg, &cfg).unwrap();
                let params = init(&reg, case);
                case += 1;
                let y = run_backbone(&bb, &params, &Tensor::zeros(vec![3, size, size + 8])).unwrap();
                let s = cfg.total_stride();
                assert_eq!(y.shape(), &[cfg.out_channels(), size / s, (size + 8) / s]);
            }
        }
    }
}

#[test]
fn channel_projection_cases() {
    let mut reg = ParamRegistry::new();
    let proj = ChannelProjection::register(&mut reg, "proj", 4, 4);
    let mut params = init(&reg, 7);
    let f = Tensor::uniform(vec![4, 3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(8));
    let run = |params: &ParamSet<f64>| {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let fv = tape.constant(f.clone());
        let y = channel_project(&mut tape, fv, &proj, &p).unwrap();
        tape.value(y).clone()
    };

    let want = naive_conv(&f, params.get(proj.layer.weight), Some(params.get(proj.layer.bias)), 1, 0);
    assert!(run(&params).max_abs_diff(&want) < 1e-12);

    zero_all(&mut params);
    assert!(run(&params).data().iter().all(|&v| v == 0.0));

    for c in 0..4 {
        params.get_mut(proj.layer.weight).set(&[c, c, 0, 0], 1.0);
    }
    assert_eq!(run(&params), f);

    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let bad = tape.constant(Tensor::zeros(vec![5, 3, 3]));
    assert!(matches!(channel_project(&mut tape, bad, &proj, &p), Err(Error::Shape(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zeroed_residual_branch_is_identity(
        c in 1usize..5,
        h in 2usize..7,
        vals in prop::collection::vec(0.0f64..5.0, 150),
    ) {
        let mut reg = ParamRegistry::new();
        let block = ResidualBlock::register(&mut reg, "b", c, c, 1);
        let mut params = init(&reg, 0);
        zero_all(&mut params);
        let x = Tensor::from_fn(vec![c, h, h], |i| vals[i % vals.len()]);
        prop_assert_eq!(run_block(&block, &params, &x).unwrap(), x);
    }
}

struct BackboneLoss {
    backbone: Backbone,
    x: Tensor<f64>,
}

impl ParamLoss for BackboneLoss {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamVars) -> Result<Var> {
        let x = tape.constant(self.x.cast());
        let y = backbone_forward(tape, x, &self.backbone, p)?;
        let sq = tape.mul(y, y)?;
        tape.mean(sq)
    }
}

#[test]
fn two_block_backbone_gradients_match_finite_differences() {
    let cfg = BackboneConfig {
        in_channels: 3,
        stage_channels: vec![4, 6],
        blocks_per_stage: vec![1, 1],
        stage_strides: vec![1, 2],
    };
    for seed in 0..3 {
        let mut reg = ParamRegistry::new();
        let backbone = Backbone::register(&mut reg, &cfg).unwrap();
        let params = init(&reg, seed);
        let x = Tensor::uniform(vec![3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(50 + seed));
        let loss = BackboneLoss { backbone, x };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = check_param_grads(&loss, &params, 3, 8, 1e-6, 1e-3, &mut rng);
        assert!(r.max_rel_error <= 1e-3, "seed {seed}: {r:?}");
    }
}
