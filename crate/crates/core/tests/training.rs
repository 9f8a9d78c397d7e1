use hafformer::data::{synthesize_dataset, Dataset, EmbeddingRecord, Split, SynthSpec};
use hafformer::mixers::{ChannelMixerKind, TokenMixerKind};
use hafformer::model::{Model, ModelConfig, ParameterStore};
use hafformer::training::{
    adamw_step, cross_entropy, evaluate, predict, train, AdamWConfig, Metrics, OptimizerState, TrainOptions,
};
use hafformer::{Error, FrameMatrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 32;
const LEN: usize = 128;

fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_dim: DIM,
        seq_len: LEN,
        seed,
        ..ModelConfig::default()
    }
}

fn tiny_data(n_per_class: usize, seed: u64) -> Dataset {
    synthesize_dataset(&SynthSpec {
        input_dim: DIM,
        max_frames: Some(LEN),
        ..SynthSpec::new(n_per_class, seed, 1.0)
    })
    .unwrap()
}

fn store_bits(store: &ParameterStore) -> Vec<u64> {
    store.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
}

fn mean_loss(model: &Model, ds: &Dataset) -> f64 {
    ds.records
        .iter()
        .map(|r| {
            let logits = model.forward(&r.features).unwrap().logits;
            cross_entropy(&logits, r.label.unwrap()).unwrap()
        })
        .sum::<f64>()
        / ds.len() as f64
}

#[test]
fn cross_entropy_examples() {
    let ln2 = std::f64::consts::LN_2;
    for label in 0..2 {
        let loss = cross_entropy(&FrameMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap(), label).unwrap();
        assert!((loss - ln2).abs() < 1e-15);
    }
    let confident = FrameMatrix::from_rows(&[vec![30.0, -30.0]]).unwrap();
    assert!(cross_entropy(&confident, 0).unwrap() < 1e-12);
    assert!(matches!(cross_entropy(&confident, 2), Err(Error::Argument(_))));
    let bad = FrameMatrix::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
    assert!(cross_entropy(&bad, 0).unwrap_err().is_numeric());
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let z: Vec<f64> = (0..2).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let y = rng.gen_range(0..2);
        let direct = -(z[y].exp() / z.iter().map(|v| v.exp()).sum::<f64>()).ln();
        let got = cross_entropy(&FrameMatrix::from_rows(&[z]).unwrap(), y).unwrap();
        assert!((got - direct).abs() < 1e-12);
    }
}

#[test]
fn prediction_ties_go_to_class_zero() {
    assert_eq!(predict(&FrameMatrix::from_rows(&[vec![0.5, 0.5]]).unwrap()), 0);
    assert_eq!(predict(&FrameMatrix::from_rows(&[vec![0.5, 0.6]]).unwrap()), 1);
}

fn scalar_store(values: &[(f64, bool)]) -> ParameterStore {
    let mut s = ParameterStore::new();
    for (i, &(v, decay)) in values.iter().enumerate() {
        s.push(format!("p{i}"), vec![1], FrameMatrix::scalar(v), decay).unwrap();
    }
    s
}

#[test]
fn adamw_zero_gradient_is_pure_decay() {
    let mut store = scalar_store(&[(1.0, true), (1.0, false)]);
    let mut state = OptimizerState::new(&store, AdamWConfig::default());
    adamw_step(&mut store, &mut state).unwrap();
    let decayed = store.get("p0").unwrap().value.item();
    assert!((decayed - 0.99999998).abs() < 1e-15, "{decayed}");
    assert_eq!(store.get("p1").unwrap().value.item(), 1.0);
    assert_eq!(state.t, 1);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let mut store = scalar_store(&[(0.25, false)]);
    store.get_mut("p0").unwrap().grad = FrameMatrix::scalar(1.0);
    let mut state = OptimizerState::new(&store, AdamWConfig::default());
    adamw_step(&mut store, &mut state).unwrap();
    let delta = store.get("p0").unwrap().value.item() - 0.25;
    assert!((delta + 2e-3 / (1.0 + 1e-8)).abs() < 1e-15, "{delta}");
    assert!((state.m[0].item() - 0.1).abs() < 1e-15);
    assert!((state.v[0].item() - 0.001).abs() < 1e-15);
}

#[test]
fn adamw_rejects_non_finite_gradients_without_side_effects() {
    let mut store = scalar_store(&[(0.5, true), (0.5, true)]);
    store.get_mut("p0").unwrap().grad = FrameMatrix::scalar(0.1);
    store.get_mut("p1").unwrap().grad = FrameMatrix::scalar(f64::INFINITY);
    let mut state = OptimizerState::new(&store, AdamWConfig::default());
    let before = store.clone();
    let err = adamw_step(&mut store, &mut state).unwrap_err();
    assert!(matches!(err, Error::Optimization(_)));
    assert!(err.to_string().contains("p1"));
    assert_eq!(store_bits(&store), store_bits(&before));
    assert_eq!(state.t, 0);
}

#[test]
fn zero_gradient_step_on_a_model_scales_only_decayed_tensors() {
    let mut model = Model::build(tiny_config(4)).unwrap();
    let before = model.store().clone();
    let cfg = AdamWConfig::default();
    let mut state = OptimizerState::new(model.store(), cfg);
    model.store_mut().zero_grad();
    adamw_step(model.store_mut(), &mut state).unwrap();
    let factor = 1.0 - cfg.lr * cfg.weight_decay;
    for (a, b) in before.iter().zip(model.store().iter()) {
        let exempt = a.name.ends_with(".bias") || a.name.ends_with(".gamma") || a.name.ends_with(".beta");
        assert_eq!(a.decay, !exempt, "{}", a.name);
        for (&x, &y) in a.value.data().iter().zip(b.value.data()) {
            if exempt {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", a.name);
            } else {
                assert!((y - x * factor).abs() <= 2.0 * f64::EPSILON * x.abs(), "{}", a.name);
            }
        }
    }
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let mut model = Model::build(tiny_config(1)).unwrap();
    let before = store_bits(model.store());
    let opts = TrainOptions {
        epochs: 0,
        ..TrainOptions::default()
    };
    let log = train(&mut model, &tiny_data(2, 1), &opts).unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(log.to_json_lines(), "");
    assert_eq!(store_bits(model.store()), before);
}

#[test]
fn one_step_reduces_the_batch_loss_for_most_seeds() {
    let mut improved = 0;
    let seeds = 0..7u64;
    let total = seeds.clone().count();
    for seed in seeds {
        let data = tiny_data(4, 100 + seed);
        let mut model = Model::build(tiny_config(seed)).unwrap();
        let before = mean_loss(&model, &data);
        let opts = TrainOptions {
            epochs: 1,
            batch_size: data.len(),
            seed,
            ..TrainOptions::default()
        };
        train(&mut model, &data, &opts).unwrap();
        let after = mean_loss(&model, &data);
        if after < before {
            improved += 1;
        }
    }
    assert!(2 * improved > total, "{improved}/{total} seeds descended");
}

#[test]
fn log_has_one_json_object_per_epoch() {
    let mut model = Model::build(tiny_config(2)).unwrap();
    let opts = TrainOptions {
        epochs: 3,
        batch_size: 3,
        ..TrainOptions::default()
    };
    let log = train(&mut model, &tiny_data(3, 2), &opts).unwrap();
    let text = log.to_json_lines();
    assert!(text.ends_with('\n'));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    for (i, line) in lines.iter().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["epoch"].as_u64(), Some(i as u64 + 1));
        let acc = v["train_acc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(v["mean_loss"].as_f64().unwrap().is_finite());
        assert!(v["wall_ms"].is_u64());
    }
}

fn run(threads: usize) -> (Vec<u64>, Vec<(usize, f64, f64)>) {
    let mut model = Model::build(tiny_config(9)).unwrap();
    let opts = TrainOptions {
        epochs: 2,
        batch_size: 4,
        seed: 5,
        threads,
        ..TrainOptions::default()
    };
    let log = train(&mut model, &tiny_data(5, 9), &opts).unwrap();
    (store_bits(model.store()), log.without_timing())
}

#[test]
fn training_is_deterministic() {
    assert_eq!(run(1), run(1));
}

#[test]
fn thread_count_does_not_change_the_result() {
    let serial = run(1);
    assert_eq!(serial, run(3));
    assert_eq!(serial, run(8));
}

#[test]
fn shuffle_seed_changes_the_trajectory() {
    let data = tiny_data(5, 9);
    let trained = |seed| {
        let mut model = Model::build(tiny_config(9)).unwrap();
        let opts = TrainOptions {
            epochs: 1,
            batch_size: 4,
            seed,
            ..TrainOptions::default()
        };
        train(&mut model, &data, &opts).unwrap();
        store_bits(model.store())
    };
    assert_ne!(trained(1), trained(2));
}

#[test]
fn numeric_failures_name_epoch_and_step() {
    let mut data = tiny_data(2, 3);
    data.records[0].features.set(0, 0, f64::NAN);
    let mut model = Model::build(tiny_config(3)).unwrap();
    let opts = TrainOptions {
        epochs: 2,
        batch_size: 1,
        ..TrainOptions::default()
    };
    let err = train(&mut model, &data, &opts).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    assert!(err.to_string().contains("epoch 1, step"), "{err}");
}

#[test]
fn training_rejects_bad_input() {
    let mut model = Model::build(tiny_config(0)).unwrap();
    let empty = Dataset::new(vec![], Split::Train).unwrap();
    assert!(matches!(
        train(&mut model, &empty, &TrainOptions::default()),
        Err(Error::Argument(_))
    ));
    let bad_batch = TrainOptions {
        batch_size: 0,
        ..TrainOptions::default()
    };
    assert!(matches!(
        train(&mut model, &tiny_data(1, 0), &bad_batch),
        Err(Error::Config { .. })
    ));
    let wide = synthesize_dataset(&SynthSpec {
        input_dim: DIM + 1,
        max_frames: Some(LEN),
        ..SynthSpec::new(1, 0, 1.0)
    })
    .unwrap();
    assert!(matches!(train(&mut model, &wide, &TrainOptions::default()), Err(Error::Shape { .. })));
}

#[test]
fn metrics_examples() {
    let labels = [0, 1, 0, 1];
    let perfect = Metrics::from_predictions(&labels, &labels, 2).unwrap();
    assert_eq!((perfect.accuracy, perfect.f1), (1.0, 1.0));
    assert_eq!(perfect.confusion, vec![vec![2, 0], vec![0, 2]]);

    let constant = Metrics::from_predictions(&labels, &[0, 0, 0, 0], 2).unwrap();
    assert_eq!(constant.accuracy, 0.5);
    assert!((constant.f1 - 1.0 / 3.0).abs() < 1e-15);

    assert!(matches!(Metrics::from_predictions(&[], &[], 2), Err(Error::Argument(_))));
}

#[test]
fn evaluate_on_an_empty_set_is_an_argument_error() {
    let model = Model::build(tiny_config(0)).unwrap();
    let empty = Dataset::new(vec![], Split::Test).unwrap();
    assert!(matches!(evaluate(&model, &empty), Err(Error::Argument(_))));
}

#[test]
fn evaluate_pads_short_records() {
    let model = Model::build(tiny_config(0)).unwrap();
    let short = EmbeddingRecord {
        id: "short".into(),
        features: FrameMatrix::filled(10, DIM, 0.3),
        label: Some(1),
    };
    let mut padded = short.clone();
    padded.features = hafformer::data::pad_or_truncate(&short.features, LEN);
    padded.id = "padded".into();
    let a = evaluate(&model, &Dataset::new(vec![short], Split::Test).unwrap()).unwrap();
    let b = evaluate(&model, &Dataset::new(vec![padded], Split::Test).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn trained_model_fits_its_training_set() {
    let data = tiny_data(8, 12);
    let mut model = Model::build(ModelConfig {
        token_mixer: TokenMixerKind::Msdw,
        channel_mixer: ChannelMixerKind::Geglu,
        ..tiny_config(12)
    })
    .unwrap();
    let before = mean_loss(&model, &data);
    let opts = TrainOptions {
        epochs: 25,
        ..TrainOptions::default()
    };
    let log = train(&mut model, &data, &opts).unwrap();
    let after = mean_loss(&model, &data);
    assert!(after < before, "{before} -> {after}");
    assert!(log.epochs.last().unwrap().mean_loss < log.epochs[0].mean_loss);
}

fn f1_oracle(labels: &[usize], preds: &[usize]) -> f64 {
    let mut total = 0.0;
    for k in 0..2 {
        let tp = labels.iter().zip(preds).filter(|(&y, &p)| y == k && p == k).count() as f64;
        let fp = labels.iter().zip(preds).filter(|(&y, &p)| y != k && p == k).count() as f64;
        let fneg = labels.iter().zip(preds).filter(|(&y, &p)| y == k && p != k).count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        total += if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    total / 2.0
}

proptest! {
    #[test]
    fn metrics_match_the_precision_recall_oracle(
        pairs in prop::collection::vec((0usize..2, 0usize..2), 1..40),
    ) {
        let (labels, preds): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = Metrics::from_predictions(&labels, &preds, 2).unwrap();
        let correct = labels.iter().zip(&preds).filter(|(a, b)| a == b).count();
        prop_assert_eq!(m.accuracy, correct as f64 / labels.len() as f64);
        prop_assert!((m.f1 - f1_oracle(&labels, &preds)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&m.f1));
    }

    #[test]
    fn metrics_are_permutation_invariant(
        pairs in prop::collection::vec((0usize..2, 0usize..2), 1..40),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let split = |v: &[(usize, usize)]| -> (Vec<usize>, Vec<usize>) { v.iter().copied().unzip() };
        let (l1, p1) = split(&pairs);
        let (l2, p2) = split(&shuffled);
        prop_assert_eq!(
            Metrics::from_predictions(&l1, &p1, 2).unwrap(),
            Metrics::from_predictions(&l2, &p2, 2).unwrap()
        );
    }

    #[test]
    fn adamw_keeps_second_moments_non_negative(
        grads in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..6),
    ) {
        let mut store = scalar_store(&[(0.1, true), (-0.2, false), (0.3, true)]);
        let mut state = OptimizerState::new(&store, AdamWConfig::default());
        for g in grads {
            for (p, v) in store.iter_mut().zip(&g) {
                p.grad = FrameMatrix::scalar(*v);
            }
            adamw_step(&mut store, &mut state).unwrap();
            prop_assert!(state.v.iter().all(|v| v.item() >= 0.0));
        }
    }
}

#[test]
fn dataset_order_does_not_change_evaluation() {
    let data = tiny_data(4, 30);
    let model = Model::build(tiny_config(30)).unwrap();
    let mut reversed = data.clone();
    reversed.records.reverse();
    assert_eq!(evaluate(&model, &data).unwrap(), evaluate(&model, &reversed).unwrap());
}
