mod common;

use common::*;
use dsq_core::nn::Session;
use dsq_core::training::{
    build_targets, load_teacher_cache, mean_nll, save_teacher_cache, segment_loss, train, Smoothing, SpecAugmentConfig,
    TeacherCache, TrainingConfig,
};
use dsq_core::{DiscourseModel, Error, Precision, Vocabulary};

const V: usize = 10;
const P: Precision = Precision::Verification;

fn config() -> TrainingConfig {
    TrainingConfig {
        batch_size: 2,
        max_epochs: 2,
        warmup_steps: 5,
        peak_lr: 5e-3,
        spec_augment: SpecAugmentConfig {
            max_freq_width: 2,
            max_time_width: 3,
            ..SpecAugmentConfig::default()
        },
        ..TrainingConfig::default()
    }
}

#[test]
fn distillation_with_zero_alpha_is_maximum_likelihood() {
    let cfg = tiny_config();
    let (lm, lm_store) = DiscourseModel::new_lm(&cfg, V, 1).unwrap();
    let (asr, store) = DiscourseModel::new_asr(&cfg, V, 2).unwrap();
    let data = vec![random_discourse(3, 3, V, Some(cfg.n_feats))];
    let teacher = TeacherCache::compute(&lm, &lm_store, &data, "h", 50, true, P).unwrap();
    let ml = build_targets(&data, V, &TrainingConfig::default(), None).unwrap();
    let kd_cfg = TrainingConfig { smoothing: Smoothing::Kd, alpha: 0.0, ..TrainingConfig::default() };
    let kd = build_targets(&data, V, &kd_cfg, Some(&teacher)).unwrap();
    assert_eq!(ml, kd);
    let s = Session::eval(&store, P);
    let a = segment_loss(&s, &asr, &data[0].utterances, &ml[0], true, None).unwrap().value().item();
    let b = segment_loss(&s, &asr, &data[0].utterances, &kd[0], true, None).unwrap().value().item();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn distillation_needs_a_teacher() {
    let data = vec![random_discourse(3, 2, V, None)];
    let cfg = TrainingConfig { smoothing: Smoothing::Kd, ..TrainingConfig::default() };
    assert!(build_targets(&data, V, &cfg, None).is_err());
}

#[test]
fn training_is_deterministic_given_the_seed() {
    let mc = tiny_config();
    let data: Vec<_> = (0..3).map(|k| random_discourse(40 + k, 3, V, Some(mc.n_feats))).collect();
    let targets = build_targets(&data, V, &config(), None).unwrap();
    let run = |seed| {
        let (model, mut store) = DiscourseModel::new_asr(&mc, V, 7).unwrap();
        let out = train(&model, &mut store, &data, &data[..1], &targets, &config(), seed, |_| {}).unwrap();
        (store, out.metrics.iter().map(|m| m.train_loss).collect::<Vec<_>>())
    };
    let (a, la) = run(1);
    let (b, lb) = run(1);
    let (c, _) = run(2);
    assert_eq!(la, lb);
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x == y));
    assert!(a.iter().zip(c.iter()).any(|(x, y)| x != y));
}

#[test]
fn loss_decreases_over_the_first_steps() {
    let mc = dsq_core::ModelConfig { dropout: 0.0, ..tiny_config() };
    let (model, mut store) = DiscourseModel::new_lm(&mc, V, 3).unwrap();
    let data = vec![random_discourse(50, 3, V, None)];
    // One segment and no dropout: each epoch is a single full-batch step.
    let cfg = TrainingConfig { max_epochs: 20, batch_size: 1, ..config() };
    let targets = build_targets(&data, V, &cfg, None).unwrap();
    let out = train(&model, &mut store, &data, &[], &targets, &cfg, 1, |_| {}).unwrap();
    assert_eq!(out.steps, 20);
    let mut losses: Vec<f64> = out.metrics.iter().map(|m| m.train_loss).collect();
    losses.push(mean_nll(&model, &store, &data, 50, true, P).unwrap());
    let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert_eq!(rises, 0, "{losses:?}");
}

#[test]
fn early_stopping_restores_the_best_epoch() {
    let mc = tiny_config();
    let (model, mut store) = DiscourseModel::new_lm(&mc, V, 4).unwrap();
    let train_set = vec![random_discourse(60, 3, V, None)];
    // Validation text unrelated to training text: it gets worse quickly.
    let valid = vec![random_discourse(61, 3, V, None)];
    let cfg = TrainingConfig { max_epochs: 30, batch_size: 1, patience: 2, peak_lr: 2e-2, ..config() };
    let targets = build_targets(&train_set, V, &cfg, None).unwrap();
    let out = train(&model, &mut store, &train_set, &valid, &targets, &cfg, 1, |_| {}).unwrap();
    let best = out.metrics.iter().map(|m| m.valid_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.metrics[out.best_epoch - 1].valid_loss, best);
    let now = mean_nll(&model, &store, &valid, cfg.max_utterances, true, P).unwrap();
    assert!((now - best).abs() < 1e-12);
}

#[test]
fn teacher_cache_round_trips_through_disk() {
    let cfg = tiny_config();
    let (lm, store) = DiscourseModel::new_lm(&cfg, V, 5).unwrap();
    let data: Vec<_> = (0..2).map(|k| random_discourse(70 + k, 3, V, None)).collect();
    let vocab = Vocabulary::build(&["abcdef"]).unwrap();
    let cache = TeacherCache::compute(&lm, &store, &data, &vocab.hash(), 2, true, P).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_teacher_cache(dir.path(), &cache).unwrap();
    let back = load_teacher_cache(dir.path(), &vocab.hash()).unwrap();
    for (id, rows) in &cache.lectures {
        for (a, b) in rows.iter().zip(&back.lectures[id]) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
    }
    let other = Vocabulary::build(&["xyz"]).unwrap();
    assert!(matches!(load_teacher_cache(dir.path(), &other.hash()), Err(Error::VocabMismatch(_))));
}
