mod common;

use std::fs;
use std::path::Path;

use common::*;
use discoprop::corpus::{Article, Split};
use discoprop::distill::{Level, LossWeights};
use discoprop::error::Error;
use discoprop::student::{
    forward_concat, forward_distill, loss_and_gradients, predict, train_student, Mode, StudentModel, TrainConfig,
};
use discoprop::teachers::{
    cache_teacher_outputs, train_relation_teacher, train_role_teacher, RelationTeacher, RoleTeacher, TeacherCache,
    TeacherSignals,
};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tempfile::{tempdir, TempDir};

fn student_config(mode: Mode, level: Level, epochs: usize) -> TrainConfig {
    TrainConfig {
        mode,
        level,
        encoder: toy_encoder(8),
        epochs,
        learning_rate: Some(1e-2),
        ..TrainConfig::default()
    }
}

struct Fixture {
    _dir: TempDir,
    cache_dir: std::path::PathBuf,
    rel_path: std::path::PathBuf,
    role_path: std::path::PathBuf,
    train: Vec<Article>,
    dev: Vec<Article>,
}

fn fixture() -> Fixture {
    let dir = tempdir().unwrap();
    let rel = train_relation_teacher(&relation_pairs(1, 5, Split::Train), &teacher_config(8, 10)).unwrap();
    let role = train_role_teacher(&role_documents(2, 3, Split::Train), &teacher_config(8, 10)).unwrap();
    let rel_path = dir.path().join("relation.ckpt");
    let role_path = dir.path().join("role.ckpt");
    rel.save(&rel_path).unwrap();
    role.save(&role_path).unwrap();
    let train = propaganda_articles(10, 4, Split::Train, "tr");
    let dev = propaganda_articles(11, 2, Split::Dev, "dv");
    let cache_dir = dir.path().join("cache");
    let all: Vec<Article> = train.iter().chain(&dev).cloned().collect();
    cache_teacher_outputs(&all, &rel, &role, &cache_dir).unwrap();
    Fixture {
        _dir: dir,
        cache_dir,
        rel_path,
        role_path,
        train,
        dev,
    }
}

fn file_digest(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

#[test]
fn distill_outputs_are_row_stochastic_and_use_zero_partner() {
    let config = student_config(Mode::Distill, Level::Sentence, 1);
    let model = StudentModel::init(&config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    for article in propaganda_articles(5, 3, Split::Test, "t") {
        let out = forward_distill(&article, &model).unwrap();
        let n = article.sentences.len();
        assert_eq!(out.q_local.dim(), (n, 4));
        assert_eq!(out.q_global.dim(), (n, 8));
        for row in out.q_local.rows().into_iter().chain(out.q_global.rows()) {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        let s = &out.sentence_embeddings;
        let first = ndarray::concatenate![ndarray::Axis(0), Array1::zeros(8), s.row(0)];
        let expected = manual_head(&model, "relation_head", first);
        for (a, b) in expected.iter().zip(out.q_local.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
        let second = ndarray::concatenate![ndarray::Axis(0), s.row(0), s.row(1)];
        let expected = manual_head(&model, "relation_head", second);
        for (a, b) in expected.iter().zip(out.q_local.row(1)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let single = Article::from_text("one", "Only one sentence here.", Split::Test);
    let out = forward_distill(&single, &model).unwrap();
    assert_eq!(out.q_local.nrows(), 1);
}

#[test]
fn empty_article_gives_empty_prediction() {
    let model = StudentModel::init(&student_config(Mode::Distill, Level::Token, 1), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let empty = Article::from_text("e", "", Split::Test);
    let out = forward_distill(&empty, &model).unwrap();
    assert!(out.prediction.sentences.is_empty());
    assert_eq!(out.q_local.nrows(), 0);
}

#[test]
fn forward_is_independent_of_other_articles() {
    let model = StudentModel::init(&student_config(Mode::Distill, Level::Token, 1), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let arts = propaganda_articles(6, 2, Split::Test, "p");
    let a1 = forward_distill(&arts[0], &model).unwrap();
    let _ = forward_distill(&arts[1], &model).unwrap();
    let a2 = forward_distill(&arts[0], &model).unwrap();
    assert_eq!(a1, a2);
    let words: usize = a1.prediction.sentences.iter().map(|s| s.words.len()).sum();
    assert_eq!(words, arts[0].num_tokens());
}

#[test]
fn concat_head_input_and_token_feature_sharing() {
    let f = fixture();
    let cache = TeacherCache::open(&f.cache_dir).unwrap();
    let config = student_config(Mode::Concat, Level::Token, 1);
    let model = StudentModel::init(&config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(model.propaganda_input_width(), 20);
    let article = &f.train[0];
    let outputs = cache.outputs(&article.article_id).unwrap();
    let pred = forward_concat(article, &outputs, &model).unwrap();
    for pp in &pred.piece_probs {
        for row in pp.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }
    // every piece of sentence 1 sees that sentence's 12 teacher features
    let enc = discoprop::encoder::encode_document(
        article,
        &model.encoder,
        &model.params.extract_prefixed("encoder"),
    )
    .unwrap();
    let feats: Vec<f64> = outputs.p_local.row(1).iter().chain(outputs.p_global.row(1)).copied().collect();
    for (k, w) in enc.token_embeddings[1].rows().into_iter().enumerate() {
        let x: Array1<f64> = w.iter().copied().chain(feats.iter().copied()).collect();
        let expected = manual_head(&model, "propa", x);
        for (a, b) in expected.iter().zip(pred.piece_probs[1].row(k)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn concat_without_cache_is_an_explicit_error() {
    let config = student_config(Mode::Concat, Level::Sentence, 1);
    let arts = propaganda_articles(6, 2, Split::Train, "p");
    let err = train_student(&arts, &[], None, &config).unwrap_err();
    assert!(matches!(err, Error::MissingTeacherCache(_)));
    assert!(err.to_string().contains("cache-teacher"));
}

#[test]
fn baseline_matches_distill_with_zero_distillation_weights() {
    let arts = propaganda_articles(7, 3, Split::Train, "b");
    let baseline = train_student(&arts, &[], None, &student_config(Mode::Baseline, Level::Sentence, 3)).unwrap();
    let zeroed = TrainConfig {
        weights: LossWeights::propaganda_only(),
        ..student_config(Mode::Distill, Level::Sentence, 3)
    };
    let distill = train_student(&arts, &[], None, &zeroed).unwrap();
    assert_eq!(baseline.step_losses, distill.step_losses);
    assert_eq!(baseline.model.params, distill.model.params);
}

#[test]
fn every_head_reaches_the_encoder() {
    let f = fixture();
    let cache = TeacherCache::open(&f.cache_dir).unwrap();
    let config = student_config(Mode::Distill, Level::Sentence, 1);
    let model = StudentModel::init(&config, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let article = &f.train[1];
    let signals = cache.signals(&article.article_id, true, true).unwrap();
    let all = LossWeights::default();
    let (report, full) = loss_and_gradients(&model, article, &signals, &all, &config).unwrap();
    assert!(report.loss_response_local.is_some() && report.loss_relation_global.is_some());
    let encoder_grad = |g: &std::collections::BTreeMap<String, Array2<f64>>| g["encoder.layer0.attn.query.weight"].clone();
    let zeroings: [fn(&mut LossWeights); 3] = [
        |w| w.propaganda = 0.0,
        |w| w.response_local = 0.0,
        |w| w.response_global = 0.0,
    ];
    for zero in zeroings {
        let mut w = all;
        zero(&mut w);
        let (_, partial) = loss_and_gradients(&model, article, &signals, &w, &config).unwrap();
        let diff = (&encoder_grad(&full) - &encoder_grad(&partial)).mapv(f64::abs).sum();
        assert!(diff > 1e-10, "zeroing a head left the encoder gradient unchanged");
        assert!(encoder_grad(&partial).iter().all(|v| v.is_finite()));
    }
}

#[test]
fn training_leaves_teacher_checkpoints_untouched() {
    let f = fixture();
    let before = (file_digest(&f.rel_path), file_digest(&f.role_path));
    let hashes = (
        RelationTeacher::load(&f.rel_path).unwrap().hash(),
        RoleTeacher::load(&f.role_path).unwrap().hash(),
    );
    let cache = TeacherCache::open(&f.cache_dir).unwrap();
    train_student(&f.train, &f.dev, Some(&cache), &student_config(Mode::Distill, Level::Sentence, 2)).unwrap();
    train_student(&f.train, &f.dev, Some(&cache), &student_config(Mode::Concat, Level::Token, 2)).unwrap();
    assert_eq!(before, (file_digest(&f.rel_path), file_digest(&f.role_path)));
    assert_eq!(
        hashes,
        (
            RelationTeacher::load(&f.rel_path).unwrap().hash(),
            RoleTeacher::load(&f.role_path).unwrap().hash()
        )
    );
}

#[test]
fn zero_local_weights_never_read_the_relation_cache() {
    let f = fixture();
    let config = TrainConfig {
        weights: LossWeights {
            response_local: 0.0,
            relation_local: 0.0,
            ..LossWeights::default()
        },
        ..student_config(Mode::Distill, Level::Sentence, 2)
    };
    let with = train_student(&f.train, &[], Some(&TeacherCache::open(&f.cache_dir).unwrap()), &config).unwrap();
    fs::remove_dir_all(f.cache_dir.join("local")).unwrap();
    let without = train_student(&f.train, &[], Some(&TeacherCache::open(&f.cache_dir).unwrap()), &config).unwrap();
    assert_eq!(with.step_losses, without.step_losses);
    assert!(with.step_losses.iter().all(|r| r.loss_response_local.is_none() && r.loss_relation_local.is_none()));

    let local = TrainConfig {
        weights: LossWeights::default(),
        ..config
    };
    let err = train_student(&f.train, &[], Some(&TeacherCache::open(&f.cache_dir).unwrap()), &local).unwrap_err();
    assert!(matches!(err, Error::MissingTeacherCache(_)), "{err}");
}

#[test]
fn divergence_reports_last_finite_losses() {
    let arts = propaganda_articles(7, 3, Split::Train, "x");
    let config = TrainConfig {
        learning_rate: Some(1e308),
        ..student_config(Mode::Baseline, Level::Sentence, 2)
    };
    match train_student(&arts, &[], None, &config) {
        Err(Error::Diverged { last_finite, .. }) => {
            let last = last_finite.expect("a finite step happened first");
            assert!(last.total.is_finite());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn predictions_are_deterministic_and_explained_with_cache() {
    let f = fixture();
    let cache = TeacherCache::open(&f.cache_dir).unwrap();
    let outcome = train_student(&f.train, &f.dev, Some(&cache), &student_config(Mode::Distill, Level::Sentence, 2)).unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    outcome.model.save(&path).unwrap();
    let model = StudentModel::load(&path).unwrap();
    let a = &f.dev[0];
    let p1 = predict(a, &model, Some(&cache)).unwrap();
    let p2 = predict(a, &model, Some(&cache)).unwrap();
    assert_eq!(p1, p2);
    assert!(p1.sentences.iter().all(|s| s.explanation.is_some()));
    assert!(p1.sentences[0].explanation.unwrap().relation.is_none());
    let bare = predict(a, &model, None).unwrap();
    assert!(bare.sentences.iter().all(|s| s.explanation.is_none()));

    let unlabeled = Article::from_text("u", "Nothing is labeled. Still predicted.", Split::Test);
    assert_eq!(predict(&unlabeled, &model, None).unwrap().sentences.len(), 2);

    let mut broken = model.clone();
    broken.encoder.hidden_dim = 16;
    broken.save(&path).unwrap();
    assert!(matches!(StudentModel::load(&path), Err(Error::Config(_))));
}

#[test]
fn ablation_is_applied_to_consumed_probabilities() {
    let f = fixture();
    let cache = TeacherCache::open(&f.cache_dir).unwrap();
    let config = TrainConfig {
        ablate_relation: Some(discoprop::corpus::Relation::Temporal),
        ..student_config(Mode::Concat, Level::Sentence, 1)
    };
    let outcome = train_student(&f.train, &[], Some(&cache), &config).unwrap();
    assert_eq!(outcome.model.ablate_relation, config.ablate_relation);
    let signals: TeacherSignals = cache.signals(&f.train[0].article_id, true, false).unwrap();
    assert!(signals.global.is_none());
}
