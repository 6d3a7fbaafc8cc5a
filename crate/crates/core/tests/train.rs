//! Training-loop behaviour: early stopping, determinism, the NaN guard and
//! the frozen-gate equivalence.

use embgate_core::data::{Encoded, Example, Featurizer};
use embgate_core::embeddings::EmbeddingStore;
use embgate_core::experiment::synth_model_config;
use embgate_core::metrics::{f1_binary, predict};
use embgate_core::model::{InjectionMode, Model};
use embgate_core::tokenize::{WordPieceVocab, CLS, PAD, SEP, UNK};
use embgate_core::train::{train, TrainConfig};
use embgate_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FILLERS: [&str; 6] = ["red", "blue", "cat", "dog", "sun", "sky"];

fn vocab() -> WordPieceVocab {
    let mut pieces: Vec<String> = [PAD, UNK, CLS, SEP, ".", "yes", "no"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    pieces.extend(FILLERS.iter().map(|s| s.to_string()));
    WordPieceVocab::from_pieces(pieces).unwrap()
}

/// Label is whether the first sentence says "yes": one token decides it.
fn separable(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let mut words: Vec<&str> = (0..rng.random_range(1..4))
                .map(|_| FILLERS[rng.random_range(0..6)])
                .collect();
            words.insert(rng.random_range(0..=words.len()), if label == 1 { "yes" } else { "no" });
            let second: Vec<&str> = (0..rng.random_range(1..4))
                .map(|_| FILLERS[rng.random_range(0..6)])
                .collect();
            Example {
                id: format!("p{i}"),
                first: format!("{}.", words.join(" ")),
                second: format!("{}.", second.join(" ")),
                label,
            }
        })
        .collect()
}

fn encoded(v: &WordPieceVocab, emb: Option<&EmbeddingStore>, n: usize, seed: u64) -> Vec<Encoded> {
    Featurizer {
        vocab: v,
        embeddings: emb,
        max_seq_len: 16,
    }
    .encode_all(&separable(n, seed))
    .unwrap()
}

fn f1_on(data: &[Encoded]) -> impl FnMut(&Model) -> embgate_core::Result<f64> + '_ {
    let golds: Vec<usize> = data.iter().map(|e| e.label).collect();
    move |m| f1_binary(&predict(m, data)?, &golds)
}

fn model(v: &WordPieceVocab, mode: InjectionMode, seed: u64) -> Model {
    Model::new(
        synth_model_config(v.len(), 4, mode),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
}

fn store() -> EmbeddingStore {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    EmbeddingStore::from_rows(
        ["yes", "no", "red", "blue", "cat", "dog"]
            .iter()
            .map(|w| (w.to_string(), (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect(),
    )
    .unwrap()
}

#[test]
fn separable_set_is_fit_within_three_epochs() {
    let v = vocab();
    let data = encoded(&v, None, 200, 3);
    let mut m = model(&v, InjectionMode::None, 0);
    let cfg = TrainConfig {
        eval_every: 10,
        ..TrainConfig::default()
    };
    let out = train(&mut m, &data, &cfg, f1_on(&data)).unwrap();
    assert_eq!(out.best_dev_f1, 1.0);
    assert_eq!(f1_on(&data)(&m).unwrap(), 1.0);
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let v = vocab();
    let data = encoded(&v, None, 40, 4);
    let mut m = model(&v, InjectionMode::None, 1);
    let before = m.params.clone();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 2,
        batch_size: 8,
        eval_every: 2,
        patience: 100,
        ..TrainConfig::default()
    };
    let out = train(&mut m, &data, &cfg, f1_on(&data)).unwrap();
    for (id, _, t) in before.iter() {
        assert_eq!(m.params.get(id), t);
    }
    assert_eq!(out.steps, 10);
    assert!(out.history.windows(2).all(|w| w[0].dev_f1 == w[1].dev_f1));
    assert_eq!(out.best_step, 2);
}

#[test]
fn patience_one_stops_after_first_decline() {
    let v = vocab();
    let data = encoded(&v, None, 64, 5);
    let mut m = model(&v, InjectionMode::None, 2);
    let mut scores = [0.9, 0.8, 0.95].into_iter();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 8,
        eval_every: 3,
        patience: 1,
        ..TrainConfig::default()
    };
    let out = train(&mut m, &data, &cfg, |_| Ok(scores.next().unwrap_or(0.0))).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.history.len(), 2);
    assert_eq!((out.steps, out.best_step, out.best_dev_f1), (6, 3, 0.9));
}

#[test]
fn best_parameters_are_restored() {
    let v = vocab();
    let data = encoded(&v, None, 32, 6);
    let mut m = model(&v, InjectionMode::None, 3);
    let mut snapshots = Vec::new();
    let mut scores = [0.2, 0.7, 0.1, 0.3].into_iter();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        eval_every: 1,
        patience: 10,
        ..TrainConfig::default()
    };
    let out = train(&mut m, &data, &cfg, |m| {
        snapshots.push(m.params.clone());
        Ok(scores.next().unwrap())
    })
    .unwrap();
    assert_eq!(out.best_step, 2);
    for (id, _, t) in snapshots[1].iter() {
        assert_eq!(m.params.get(id), t);
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let v = vocab();
    let data = encoded(&v, None, 48, 7);
    let run = |seed: u64| {
        let mut m = model(&v, InjectionMode::None, seed);
        let cfg = TrainConfig {
            seed,
            epochs: 2,
            eval_every: 2,
            ..TrainConfig::default()
        };
        let out = train(&mut m, &data, &cfg, f1_on(&data)).unwrap();
        (out.history_csv(), m.params.get(m.layout.classifier).clone())
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4).1, run(5).1);
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let v = vocab();
    let data = encoded(&v, None, 16, 8);
    let mut m = model(&v, InjectionMode::None, 4);
    let id = m.layout.classifier_bias;
    m.params.get_mut(id).data_mut()[0] = f64::NAN;
    let err = train(&mut m, &data, &TrainConfig::default(), f1_on(&data)).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 1, .. }), "{err}");
}

#[test]
fn bad_training_sets_are_rejected() {
    let v = vocab();
    let mut m = model(&v, InjectionMode::None, 4);
    assert!(matches!(
        train(&mut m, &[], &TrainConfig::default(), |_| Ok(0.0)),
        Err(Error::Data(_))
    ));
    let mut data = encoded(&v, None, 4, 9);
    data[0].label = 2;
    assert!(matches!(
        train(&mut m, &data, &TrainConfig::default(), |_| Ok(0.0)),
        Err(Error::Data(_))
    ));
}

#[test]
fn frozen_gate_reproduces_plain_training() {
    let v = vocab();
    let emb = store();
    let plain_data = encoded(&v, None, 64, 10);
    let inj_data = encoded(&v, Some(&emb), 64, 10);
    let cfg = TrainConfig {
        epochs: 2,
        eval_every: 3,
        freeze_gate: true,
        ..TrainConfig::default()
    };
    let mut plain = model(&v, InjectionMode::None, 5);
    let mut gated = model(&v, InjectionMode::Gated, 5);
    let a = train(&mut plain, &plain_data, &cfg, f1_on(&plain_data)).unwrap();
    let b = train(&mut gated, &inj_data, &cfg, f1_on(&inj_data)).unwrap();
    assert_eq!(a.history_csv(), b.history_csv());
    for (id, name, t) in plain.params.iter() {
        assert_eq!(gated.params.by_name(name).unwrap(), t, "{name} ({})", id.index());
    }
    assert!(gated.gate().unwrap().data().iter().all(|&g| g == 0.0));
    assert_eq!(
        predict(&plain, &plain_data).unwrap(),
        predict(&gated, &inj_data).unwrap()
    );
}
