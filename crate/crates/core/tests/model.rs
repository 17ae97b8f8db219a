//! End-to-end model contracts and checkpoint round trips.

mod common;

use common::{check_param_grads, ParamLoss};
use histoswin::backbone::BackboneConfig;
use histoswin::checkpoint::{self, decode, encode};
use histoswin::params::ParamVars;
use histoswin::tensor::Scalar;
use histoswin::{Error, HybridModel, HybridModelConfig, Prediction, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn input(cfg: &HybridModelConfig, seed: u64) -> Tensor<f32> {
    Tensor::uniform(vec![3, cfg.input_size, cfg.input_size], 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn small() -> HybridModelConfig {
    HybridModelConfig {
        input_size: 16,
        backbone: BackboneConfig {
            in_channels: 3,
            stage_channels: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            stage_strides: vec![2, 1],
        },
        embed_dim: 8,
        heads: 2,
        window: 4,
        shift: 2,
        num_swin_blocks: 1,
        num_classes: 3,
        seed: 0,
        position_bias: false,
    }
}

#[test]
fn same_seed_same_params_and_different_seed_differs() {
    let cfg = HybridModelConfig::desk();
    let a = HybridModel::init(&cfg).unwrap();
    let b = HybridModel::init(&cfg).unwrap();
    assert_eq!(a.params(), b.params());
    let c = HybridModel::init(&HybridModelConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn desk_parameter_count_matches_shape_arithmetic() {
    let cfg = HybridModelConfig::desk();
    let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
    // stride-2 blocks 3→16 and 16→32, each with a projection shortcut
    let backbone = conv(3, 16, 3) + conv(16, 16, 3) + conv(3, 16, 1) + conv(16, 32, 3) + conv(32, 32, 3) + conv(16, 32, 1);
    let d = cfg.embed_dim;
    let attention = 3 * d * d + d * d;
    let block = 2 * attention + 2 * d;
    let expected = backbone + conv(32, d, 1) + cfg.num_swin_blocks * block + cfg.num_classes * d + cfg.num_classes;
    let model = HybridModel::init(&cfg).unwrap();
    assert_eq!(model.params().numel(), expected);
    assert_eq!(model.layout().registry.numel(), expected);
}

#[test]
fn invalid_config_is_a_config_error() {
    let cfg = HybridModelConfig { embed_dim: 30, heads: 4, ..HybridModelConfig::desk() };
    assert!(matches!(HybridModel::init(&cfg), Err(Error::Config(_))));
}

#[test]
fn probabilities_are_a_distribution() {
    let cfg = HybridModelConfig::desk();
    let model = HybridModel::init(&cfg).unwrap();
    let p = model.forward(&input(&cfg, 1)).unwrap();
    assert_eq!(p.probabilities.len(), 2);
    assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    assert!(p.probabilities.iter().all(|&v| v >= 0.0));
    assert_eq!(p.confidence, p.probabilities[p.label]);
}

#[test]
fn zero_head_gives_uniform_and_label_zero() {
    let cfg = HybridModelConfig { num_classes: 4, ..HybridModelConfig::desk() };
    let mut model = HybridModel::init(&cfg).unwrap();
    let (w, b) = (model.layout().head_weight, model.layout().head_bias);
    model.params_mut().get_mut(w).data_mut().fill(0.0);
    model.params_mut().get_mut(b).data_mut().fill(0.0);
    let p = model.forward(&input(&cfg, 2)).unwrap();
    assert_eq!(p.probabilities, vec![0.25; 4]);
    assert_eq!(p.label, 0);
}

#[test]
fn forward_is_repeatable_and_batch_agrees() {
    let cfg = HybridModelConfig::desk();
    let model = HybridModel::init(&cfg).unwrap();
    let xs: Vec<_> = (0..4).map(|i| input(&cfg, 10 + i)).collect();
    let singles: Vec<Prediction> = xs.iter().map(|x| model.forward(x).unwrap()).collect();
    assert_eq!(model.forward(&xs[0]).unwrap(), singles[0]);
    let batch = model.classify_batch(&xs).unwrap();
    assert_eq!(batch.len(), 4);
    for (b, s) in batch.iter().zip(&singles) {
        assert_eq!(b.label, s.label);
        for (x, y) in b.probabilities.iter().zip(&s.probabilities) {
            assert!((x - y).abs() <= 1e-5);
        }
    }
    assert!(model.classify_batch(&[]).unwrap().is_empty());
    assert_eq!(model.classify_batch(&xs[..1]).unwrap()[0], singles[0]);
}

#[test]
fn shape_errors() {
    let cfg = HybridModelConfig::desk();
    let model = HybridModel::init(&cfg).unwrap();
    assert!(matches!(model.forward(&Tensor::zeros(vec![3, 32, 32])), Err(Error::Shape(_))));
    let mixed = vec![input(&cfg, 0), Tensor::zeros(vec![3, 32, 32])];
    assert!(matches!(model.classify_batch(&mixed), Err(Error::Shape(_))));
}

#[test]
fn overflowing_parameters_are_a_numeric_error() {
    let cfg = small();
    let mut model = HybridModel::init(&cfg).unwrap();
    model.params_mut().tensors_mut()[0].data_mut().fill(1e30);
    assert!(matches!(model.forward(&input(&cfg, 0)), Err(Error::Numeric(_))));
}

#[test]
fn embedding_and_head_compose_to_forward() {
    let cfg = HybridModelConfig::desk();
    let model = HybridModel::init(&cfg).unwrap();
    let x = input(&cfg, 3);
    let z = model.embed(&x).unwrap();
    assert_eq!(z.shape(), &[cfg.embed_dim]);
    assert_eq!(model.head_proba(&z).unwrap(), model.probabilities(&x).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn simplex_for_any_input_and_seed(seed in any::<u64>(), scale in 0.01f64..20.0) {
        let cfg = HybridModelConfig { seed, ..small() };
        let model = HybridModel::init(&cfg).unwrap();
        let x = Tensor::uniform(vec![3, 16, 16], scale, &mut ChaCha8Rng::seed_from_u64(seed ^ 7));
        let p = model.forward(&x).unwrap();
        prop_assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(p.probabilities.iter().all(|&v| v >= 0.0));
        let best = p.probabilities.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(p.label, p.probabilities.iter().position(|&v| v == best).unwrap());
    }
}

struct ModelLoss {
    model: HybridModel<f64>,
    x: Tensor<f64>,
    target: usize,
}

impl ParamLoss for ModelLoss {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamVars) -> Result<Var> {
        let model = self.model.cast::<T>();
        let x = tape.constant(self.x.cast());
        let out = model.record(tape, p, x, None)?;
        tape.cross_entropy(out.probabilities, self.target)
    }
}

#[test]
fn small_model_gradients_match_finite_differences() {
    let cfg = HybridModelConfig { position_bias: true, ..small() };
    let model = HybridModel::init(&cfg).unwrap().cast::<f64>();
    let params = model.params().clone();
    let loss = ModelLoss {
        model,
        x: input(&cfg, 4).cast(),
        target: 1,
    };
    let r = check_param_grads(&loss, &params, 2, 6, 1e-6, 1e-3, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(r.max_rel_error <= 1e-3, "{r:?}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = HybridModel::init(&HybridModelConfig { seed: 9, ..HybridModelConfig::desk() }).unwrap();
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.params(), model.params());
    assert_eq!(back.config(), model.config());
    assert_eq!(encode(&back), std::fs::read(&path).unwrap());
    let bits = |m: &HybridModel| -> Vec<u32> {
        m.params().tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
    };
    assert_eq!(bits(&back), bits(&model));
}

#[test]
fn truncated_checkpoint_is_a_structured_error() {
    let bytes = encode(&HybridModel::init(&small()).unwrap());
    for cut in (4..bytes.len()).step_by(97) {
        assert!(matches!(decode(&bytes[..cut]), Err(Error::Truncated(_))));
    }
}

#[test]
fn class_count_mismatch_names_the_head_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k2.ckpt");
    checkpoint::save(&HybridModel::init(&HybridModelConfig::desk()).unwrap(), &path).unwrap();
    let k3 = HybridModelConfig { num_classes: 3, ..HybridModelConfig::desk() };
    match checkpoint::load_expecting(&path, &k3) {
        Err(Error::ConfigMismatch(msg)) => assert!(msg.contains("head.weight"), "{msg}"),
        other => panic!("expected config mismatch, got {other:?}"),
    }
    let shifted = HybridModelConfig { shift: 1, ..HybridModelConfig::desk() };
    assert!(matches!(checkpoint::load_expecting(&path, &shifted), Err(Error::ConfigMismatch(_))));
    let reseeded = HybridModelConfig { seed: 5, ..HybridModelConfig::desk() };
    assert!(checkpoint::load_expecting(&path, &reseeded).is_ok());
}

#[test]
fn non_checkpoint_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    std::fs::write(&path, b"hello world").unwrap();
    assert!(matches!(checkpoint::load(&path), Err(Error::NotCheckpoint)));
    assert!(matches!(checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
}
