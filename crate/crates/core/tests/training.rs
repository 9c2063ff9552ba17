mod common;

use setrisk_core::corpus::{generate_synthetic, EmbeddingStore, SyntheticSpec};
use setrisk_core::model::{bind, logit_on_tape, loss_and_grads, Mode};
use setrisk_core::tape::Tape;
use setrisk_core::training::{
    adamw_step, class_weights, cyclical_lr, mean_gradients, train, train_epochs, OptimizerState, TrainConfig,
    TrainData, TrainingState,
};
use setrisk_core::{Error, Executor, ModelConfig, SetClassifier, Tensor};

fn small_corpus(seed: u64) -> setrisk_core::corpus::SyntheticCorpus {
    let mut spec = SyntheticSpec::new(12, 28, 16, seed);
    spec.posts_min = 5;
    spec.posts_max = 30;
    generate_synthetic(&spec).unwrap()
}

fn small_config() -> (ModelConfig, TrainConfig) {
    let mcfg = ModelConfig::small(16, 16, 1, 2);
    let tcfg = TrainConfig {
        k: 8,
        epochs: 20,
        effective_batch_size: 8,
        lr_min: 1e-4,
        lr_max: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    };
    (mcfg, tcfg)
}

#[test]
fn accumulated_mean_gradient_equals_gradient_of_mean_loss() {
    let cfg = ModelConfig::small(6, 16, 2, 2);
    let mut model = SetClassifier::init(cfg.clone(), 3).unwrap();
    common::perturb_biases(&mut model, 0.1, 4);
    let sets: Vec<_> = (0..5).map(|i| common::random_set(2 + i, 6, 10 + i as u64)).collect();
    let targets = [1.0, 0.0, 1.0, 0.0, 0.0];
    let weights = [2.5, 0.6, 2.5, 0.6, 0.6];

    let per_user: Vec<Vec<Tensor>> = sets
        .iter()
        .zip(targets.iter().zip(&weights))
        .map(|(s, (&t, &w))| loss_and_grads(s, t, w, &model.params, &cfg, Mode::Eval).unwrap().1)
        .collect();
    let accumulated = mean_gradients(&per_user);

    let mut tape = Tape::new();
    let bound = bind(&mut tape, &model.params, true);
    let mut total = None;
    for (s, (&t, &w)) in sets.iter().zip(targets.iter().zip(&weights)) {
        let x = tape.constant(s.embeddings.clone());
        let z = logit_on_tape(&mut tape, &bound, x, &cfg, Mode::Eval).unwrap();
        let l = tape.bce_with_logits(z, t, w).unwrap();
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l).unwrap(),
        });
    }
    let mean = tape.scale(total.unwrap(), 1.0 / sets.len() as f64);
    tape.backward(mean).unwrap();
    for (v, acc) in bound.vars().iter().zip(&accumulated) {
        let direct = tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(acc.shape()));
        let err = common::relative_error(acc, &direct);
        assert!(err < 1e-10, "relative error {err:e}");
    }
}

#[test]
fn resumed_run_is_bit_identical() {
    let corpus = small_corpus(1);
    let (mcfg, tcfg) = small_config();
    let straight = train(&corpus.users, &corpus.store, mcfg.clone(), tcfg.clone(), &Executor::sequential()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ckpt");
    let mut first = TrainingState::new(mcfg, tcfg).unwrap();
    let data = TrainData::new(&corpus.users, &corpus.store, &first.train_config).unwrap();
    train_epochs(&mut first, &data, 10, &Executor::sequential()).unwrap();
    first.save(&path).unwrap();
    let mut resumed = TrainingState::load(&path).unwrap();
    assert_eq!(resumed, first);
    train_epochs(&mut resumed, &data, 10, &Executor::sequential()).unwrap();

    assert_eq!(resumed.epochs_done, 20);
    assert_eq!(resumed.params.flatten(), straight.params.flatten());
    assert_eq!(resumed, straight);
}

#[test]
fn worker_count_does_not_change_the_result() {
    let corpus = small_corpus(2);
    let (mcfg, mut tcfg) = small_config();
    tcfg.epochs = 4;
    let seq = train(&corpus.users, &corpus.store, mcfg.clone(), tcfg.clone(), &Executor::sequential()).unwrap();
    let par = train(&corpus.users, &corpus.store, mcfg, tcfg, &Executor::new(4)).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn small_model_learns_the_planted_signal() {
    let corpus = small_corpus(3);
    let (mcfg, tcfg) = small_config();
    let state = train(&corpus.users, &corpus.store, mcfg, tcfg, &Executor::sequential()).unwrap();
    assert!(state.best_val_f1 >= 0.9, "{}", state.best_val_f1);
    assert_eq!(state.log.len(), 20);
    assert!(state.log.last().unwrap().train_loss < state.log[0].train_loss);
}

#[test]
fn dataset_is_linearly_learnable() {
    let corpus = generate_synthetic(&SyntheticSpec::new(200, 800, 64, 7)).unwrap();
    let f1 = common::linear_probe_f1(&corpus, 16, 1);
    assert!(f1 >= 0.99, "{f1}");
}

#[test]
fn schedule_and_weights_examples() {
    let w = class_weights(164, 2184).unwrap();
    assert!((w.positive - 2348.0 / 328.0).abs() < 1e-12);
    assert!((w.negative - 2348.0 / 4368.0).abs() < 1e-12);
    let cfg = TrainConfig::default();
    assert_eq!(cyclical_lr(0, 10, &cfg), 1e-5);
    assert!((cyclical_lr(30, 10, &cfg) - 1e-4).abs() < 1e-18);
    assert!((cyclical_lr(60, 10, &cfg) - 1e-5).abs() < 1e-18);
}

#[test]
fn adamw_matches_scalar_oracle() {
    let (lr, wd) = (0.05, 0.1);
    let grads = [0.3, -1.2, 0.7, 0.0, 2.0];
    let mut p = Tensor::new(vec![1, 1], vec![0.8]).unwrap();
    let mut params = SetClassifier::init(ModelConfig::small(1, 2, 1, 1), 0).unwrap().params;
    let n = params.tensors().len();
    *params.tensors_mut()[n - 1] = p.clone();
    let mut state = OptimizerState::new(&params);
    let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.8f64);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        x -= lr * (mh / (vh.sqrt() + 1e-8) + wd * x);
        let mut gs: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        gs[n - 1] = Tensor::new(vec![1, 1], vec![g]).unwrap();
        adamw_step(&mut params, &gs, &mut state, lr, wd).unwrap();
        p = params.tensors()[n - 1].clone();
        assert!((p.item().unwrap() - x).abs() < 1e-14);
    }
}

#[test]
fn non_finite_input_reports_divergence_with_last_good_weights() {
    let corpus = small_corpus(4);
    let mut entries = Vec::new();
    for u in &corpus.users {
        for p in &u.posts {
            let mut v = corpus.store.get(&p.post_id).unwrap().to_vec();
            if u.label.is_positive() {
                v[0] = f32::NAN;
            }
            entries.push((p.post_id.clone(), v));
        }
    }
    let store = EmbeddingStore::from_entries("nan", 16, entries).unwrap();
    let (mcfg, tcfg) = small_config();
    let init = TrainingState::new(mcfg.clone(), tcfg.clone()).unwrap().params;
    match train(&corpus.users, &store, mcfg, tcfg, &Executor::sequential()) {
        Err(Error::Diverged { epoch, last_good, .. }) => {
            assert_eq!(epoch, 1);
            assert_eq!(*last_good, init);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}
