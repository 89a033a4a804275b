use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use edgecnn::data::{synthesize, SynthConfig};
use edgecnn::evalbench::evaluate;
use edgecnn::layers::{softmax_rows, Mode};
use edgecnn::model::{self, read_artifact, write_checkpoint, Artifact, Checkpoint, Classifier, GraphConfig, ModelGraph, Precision};
use edgecnn::quantize::quantize_model;
use edgecnn::tensor::Tensor;
use edgecnn::train::{
    adam_step, augment_batch, class_weighted_batch_loss, fit, softmax_cross_entropy_grad, split_dataset,
    AdamConfig, AdamState, TrainConfig,
};

fn narrow(size: usize, classes: usize) -> GraphConfig {
    GraphConfig {
        conv1_filters: 6,
        conv2_filters: 8,
        dense_units: 16,
        ..GraphConfig::new(size, classes)
    }
}

fn random_batch(n: usize, size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * size * size * 3).map(|_| rng.random::<f32>()).collect();
    Tensor::from_vec([n, size, size, 3], data).unwrap()
}

fn first_adam_update(graph: &ModelGraph<f32>, x: &Tensor<f32>, labels: &[usize], w: &[f32]) -> (f32, Vec<f32>) {
    let (logits, trace) = graph.forward_train(x, &mut Mode::Infer).unwrap();
    let probs = softmax_rows(&logits).unwrap();
    let loss = class_weighted_batch_loss(&probs, labels, w).unwrap();
    let grads = graph.backward(&trace, &softmax_cross_entropy_grad(&probs, labels, w).unwrap()).unwrap();
    let mut g = graph.clone();
    let before: Vec<f32> = graph.params().iter().flat_map(|t| t.data().to_vec()).collect();
    let mut state = AdamState::new(&g.params());
    adam_step(&mut g.params_mut(), &grads, &mut state, &AdamConfig::default()).unwrap();
    let after = g.params().into_iter().flat_map(|t| t.data().to_vec());
    (loss, after.zip(before).map(|(a, b)| a - b).collect())
}

#[test]
fn uniform_class_weight_scaling() {
    let graph = ModelGraph::<f32>::init(narrow(12, 2), 5).unwrap();
    let x = random_batch(4, 12, 6);
    let labels = [0, 1, 1, 0];
    let (l1, u1) = first_adam_update(&graph, &x, &labels, &[1.0, 1.3]);
    let (l3, u3) = first_adam_update(&graph, &x, &labels, &[3.0, 3.9]);
    assert!((l3 / l1 - 3.0).abs() < 1e-5, "loss ratio {}", l3 / l1);
    let dot: f64 = u1.iter().zip(&u3).map(|(a, b)| *a as f64 * *b as f64).sum();
    let norm = |u: &[f32]| u.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
    let cosine = dot / (norm(&u1) * norm(&u3));
    assert!(cosine > 0.999, "cosine {cosine}");
}

#[test]
fn fit_is_bit_reproducible() {
    let ds = synthesize(&SynthConfig::new(6, 16, 3)).unwrap();
    let (tr, va) = split_dataset(&ds, 0.85, 3).unwrap();
    let cfg = TrainConfig {
        max_epochs: 2,
        seed: 4,
        ..TrainConfig::default()
    };
    let start = Checkpoint::fresh(ModelGraph::init(narrow(16, 5), 1).unwrap());
    let run = || {
        let (ckpt, hist) = fit(start.clone(), &tr, &va, &cfg).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ckpt).unwrap();
        (bytes, hist)
    };
    assert_eq!(run(), run());
}

#[test]
fn quantized_predictions_agree_with_f32() {
    let ds = synthesize(&SynthConfig::new(30, 32, 11)).unwrap();
    let (tr, va) = split_dataset(&ds, 0.85, 1).unwrap();
    let cfg = TrainConfig {
        max_epochs: 6,
        seed: 2,
        ..TrainConfig::default()
    };
    let start = Checkpoint::fresh(model::build(32, 5, 2).unwrap());
    let (ckpt, _) = fit(start, &tr, &va, &cfg).unwrap();

    let test = synthesize(&SynthConfig::new(40, 32, 12)).unwrap();
    let f16 = quantize_model(&ckpt, Precision::F16, None).unwrap();
    let i8m = quantize_model(&ckpt, Precision::I8, Some(&tr)).unwrap();
    let argmaxes = |m: &dyn Classifier| -> Vec<usize> {
        test.items()
            .chunks(50)
            .flat_map(|chunk| {
                let x = edgecnn::train::image_batch(chunk.iter().map(|(i, _)| i)).unwrap();
                let p = m.predict_batch(&x).unwrap();
                p.data()
                    .chunks(5)
                    .map(|r| (0..5).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap())
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let base = argmaxes(&ckpt);
    let agree = |other: Vec<usize>| base.iter().zip(&other).filter(|(a, b)| a == b).count() as f64 / base.len() as f64;
    let a16 = agree(argmaxes(&f16));
    let a8 = agree(argmaxes(&i8m));
    assert!(a16 >= 0.95, "f16 agreement {a16}");
    assert!(a8 >= 0.90, "i8 agreement {a8}");
    // Evaluation is deterministic.
    assert_eq!(evaluate(&i8m, &test).unwrap(), evaluate(&i8m, &test).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn export_keeps_param_count(size in 10usize..40, classes in 2usize..7, seed in 0u64..1000) {
        let cfg = narrow(size, classes);
        let graph = ModelGraph::<f32>::init(cfg, seed).unwrap();
        prop_assert_eq!(graph.param_count(), cfg.param_count().unwrap());
        let ckpt = Checkpoint::fresh(graph);
        for p in [Precision::F32, Precision::F16] {
            prop_assert_eq!(quantize_model(&ckpt, p, None).unwrap().param_count(), ckpt.param_count());
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(size in 10usize..30, seed in 0u64..1000) {
        let ckpt = Checkpoint::fresh(ModelGraph::init(narrow(size, 3), seed).unwrap());
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ckpt).unwrap();
        let Artifact::Checkpoint(back) = read_artifact(bytes.as_slice()).unwrap() else {
            panic!("read back a deployed model");
        };
        prop_assert_eq!(*back, ckpt);
    }

    #[test]
    fn inference_is_deterministic(seed in 0u64..1000) {
        let graph = ModelGraph::<f32>::init(narrow(14, 4), seed).unwrap();
        let x = random_batch(2, 14, seed + 1);
        let a = graph.predict_batch(&x).unwrap();
        let b = graph.predict_batch(&x).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        for row in a.data().chunks(4) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn double_flip_is_identity(n in 1usize..3, h in 1usize..6, w in 1usize..6, seed in 0u64..100) {
        let x = random_batch(n, h.max(w), seed);
        let x = Tensor::from_vec([n, h, w, 3], x.data()[..n * h * w * 3].to_vec()).unwrap();
        let mut y = x.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        augment_batch(&mut y, 1.0, &mut rng).unwrap();
        augment_batch(&mut y, 1.0, &mut rng).unwrap();
        prop_assert_eq!(y, x);
    }
}
