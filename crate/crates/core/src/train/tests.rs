use super::*;
use crate::data::{generate_synthetic, SyntheticConfig, Truncation, Vocabulary};

fn small_data(users: usize) -> (Vec<WindowedUser>, Vocabulary) {
    let cfg = SyntheticConfig {
        users,
        topics: 4,
        tokens_per_topic: 20,
        tokens_per_user_topic: 10,
        vocab_size: 80,
        behaviors_per_window: 6,
        words_per_behavior: 4,
        seed: 5,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic(&cfg).unwrap();
    let vocab = ds.vocabulary(1000).unwrap();
    let users = ds.windowed(&vocab, &Truncation::default()).unwrap();
    (users, vocab)
}

fn small_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        max_epochs: 4,
        dim: 8,
        dict_size: 6,
        top_k: 2,
        learning_rate: 0.01,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn defaults_accepted() {
    let c = TrainConfig::default();
    assert_eq!(c.batch_size, 256);
    assert_eq!(c.learning_rate, 0.001);
    c.validate().unwrap();
}

#[test]
fn invalid_configs_rejected() {
    let bad = [
        TrainConfig { batch_size: 1, ..TrainConfig::default() },
        TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
        TrainConfig { top_k: 20, ..TrainConfig::default() },
        TrainConfig { validation_fraction: 1.0, ..TrainConfig::default() },
        TrainConfig { tau: 0.0, ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
    // Pooling has no dictionary, so K and M are unconstrained.
    TrainConfig { top_k: 20, variant: Variant::MaxpoolCl, ..TrainConfig::default() }
        .validate()
        .unwrap();
}

#[test]
fn config_json_rejects_unknown_fields() {
    let c: TrainConfig = serde_json::from_str(r#"{"batch_size": 8, "mode": "long"}"#).unwrap();
    assert_eq!(c.batch_size, 8);
    assert_eq!(c.mode, Mode::Long);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"batchsize": 8}"#).is_err());
}

#[test]
fn validation_split_is_disjoint_and_stable() {
    let (users, _) = small_data(300);
    let (tr, va) = split_users(&users, Mode::Short, 0.1);
    assert_eq!(tr.len() + va.len(), users.len());
    assert!(!va.is_empty() && va.len() < 60, "{}", va.len());
    for v in &va {
        assert!(tr.iter().all(|t| t.user_id != v.user_id));
    }
    let (tr2, va2) = split_users(&users, Mode::Short, 0.1);
    assert_eq!(tr, tr2);
    assert_eq!(va, va2);
    // Growing the fraction only moves users into validation.
    let (_, va3) = split_users(&users, Mode::Short, 0.3);
    assert!(va.iter().all(|u| va3.iter().any(|w| w.user_id == u.user_id)));
}

#[test]
fn insufficient_users_is_data_error() {
    let (users, vocab) = small_data(10);
    let r = train(&users, &small_config(), vocab.len());
    assert!(matches!(r, Err(Error::Data(_))), "{r:?}");
}

#[test]
fn one_step_changes_only_parameters() {
    let (users, vocab) = small_data(40);
    let before_users = users.clone();
    let cfg = small_config();
    let mut t = Trainer::new(cfg.clone(), vocab.len()).unwrap();
    let before = t.model.clone();
    let batch: Vec<&WindowedUser> = users.iter().take(8).collect();
    let loss = t.step(&batch).unwrap();
    assert!(loss.is_finite());
    assert_eq!(t.model.config, before.config);
    assert_eq!(t.config, cfg);
    assert_eq!(users, before_users);
    assert_eq!(t.adam.step, 1);
    for (name, p) in &t.model.params {
        assert_ne!(p, &before.params[name], "{name} did not move");
        assert!(p.data().iter().all(|v| *v == *v as f32 as f64));
    }
}

#[test]
fn training_is_deterministic() {
    let (users, vocab) = small_data(120);
    let cfg = small_config();
    let a = train(&users, &cfg, vocab.len()).unwrap();
    let b = train(&users, &cfg, vocab.len()).unwrap();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.history, b.history);
    let other = train(&users, &TrainConfig { seed: 12, ..cfg }, vocab.len()).unwrap();
    assert_ne!(a.checkpoint.params, other.checkpoint.params);
}

#[test]
fn loss_is_finite_and_decreases() {
    let (users, vocab) = small_data(200);
    let cfg = TrainConfig { max_epochs: 8, ..small_config() };
    let out = train(&users, &cfg, vocab.len()).unwrap();
    let h = &out.history;
    assert!(h.step_losses.iter().all(|l| l.is_finite()));
    let b = cfg.batch_size as f64;
    // A uniform similarity matrix gives every anchor log(B).
    assert!((h.step_losses[0] - b * b.ln()).abs() < 0.5 * b * b.ln(), "{}", h.step_losses[0]);
    assert!(out.checkpoint.header.validation_loss < h.initial_validation_loss);
    let last = h.epochs.last().unwrap().train_loss;
    assert!(last < h.step_losses[0], "{last} vs {}", h.step_losses[0]);
    assert_eq!(out.checkpoint.header.epoch, h.best_epoch);
}

#[test]
fn early_stopping_respects_patience() {
    let (users, vocab) = small_data(120);
    // A huge min_delta means no epoch ever counts as an improvement.
    let cfg = TrainConfig { min_delta: 1e9, patience: 2, max_epochs: 10, ..small_config() };
    let out = train(&users, &cfg, vocab.len()).unwrap();
    assert_eq!(out.history.epochs.len(), 2);
    assert!(out.history.stopped_early);
    assert_eq!(out.checkpoint.header.epoch, 0);
    assert_eq!(out.checkpoint.adam_state().unwrap().step, 0);
}

#[test]
fn best_checkpoint_resumes_model() {
    let (users, vocab) = small_data(120);
    let out = train(&users, &small_config(), vocab.len()).unwrap();
    let model = out.checkpoint.model().unwrap();
    let back = Checkpoint::from_bytes(&out.checkpoint.to_bytes().unwrap()).unwrap();
    assert_eq!(back.model().unwrap(), model);
    let (_, va) = split_users(&users, Mode::Short, 0.1);
    let l = mean_loss(&model, &va, Mode::Short, &small_config().loss(), 16).unwrap();
    assert_eq!(l, out.checkpoint.header.validation_loss);
}

#[test]
fn long_mode_trains() {
    let (users, vocab) = small_data(120);
    let out = train(&users, &TrainConfig { mode: Mode::Long, ..small_config() }, vocab.len()).unwrap();
    assert!(out.history.step_losses.iter().all(|l| l.is_finite()));
}
