use std::collections::BTreeMap;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ablate_relation_probs, assemble_prediction, build_graph, Mode, StudentModel, TrainConfig};
use crate::autograd::Tape;
use crate::corpus::{propagate_to_subwords, Article};
use crate::distill::{
    propaganda_ce, propaganda_ce_grad, relation_mse, relation_mse_grad, response_kl, response_kl_grad,
    spatial_matrix, spatial_matrix_backward, total_loss, Level, LossReport, LossWeights,
};
use crate::encoder::{EncodedInput, Encoder};
use crate::error::{Error, Result};
use crate::eval::{gold_units, score, MetricsReport};
use crate::optim::{AdamW, AdamWConfig, LinearSchedule};
use crate::teachers::{TeacherCache, TeacherSignals};

type Grads = BTreeMap<String, Array2<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-article loss decomposition over the epoch.
    pub loss: LossReport,
    pub train: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub model: StudentModel,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    /// Loss decomposition of every optimiser step, in order.
    pub step_losses: Vec<LossReport>,
}

/// Gold class per propaganda-head row: sentences, or the sub-word pieces of
/// surviving sentences in order.
fn targets(article: &Article, input: &EncodedInput, level: Level) -> Result<Vec<usize>> {
    let missing = |what: String| Error::Article {
        article_id: article.article_id.clone(),
        message: format!("{what} has no gold label"),
    };
    let mut out = Vec::new();
    for (i, sp) in input.sentences.iter().enumerate() {
        let sentence = &article.sentences[i];
        match level {
            Level::Sentence => {
                let l = sentence.gold_label.ok_or_else(|| missing(format!("sentence {i}")))?;
                out.push(l.class_index());
            }
            Level::Token => {
                let words: Vec<_> = sentence.tokens.iter().map(|t| t.gold_label).collect();
                let pieces = propagate_to_subwords(&sp.alignment, &words);
                if pieces.len() != sp.positions.len() {
                    return Err(Error::Alignment(format!(
                        "article {} sentence {i}: {} aligned pieces for {} encoder positions",
                        article.article_id,
                        pieces.len(),
                        sp.positions.len()
                    )));
                }
                for p in pieces {
                    out.push(p.ok_or_else(|| missing(format!("a token of sentence {i}")))?.class_index());
                }
            }
        }
    }
    Ok(out)
}

fn teacher_rows<'a>(m: &'a Array2<f64>, n: usize, what: &str) -> Result<ndarray::ArrayView2<'a, f64>> {
    if m.nrows() < n {
        return Err(Error::Alignment(format!(
            "{what} covers {} sentences but the student encodes {n}; re-run cache-teacher with the student's encoder settings",
            m.nrows()
        )));
    }
    Ok(m.slice(s![..n, ..]))
}

/// Loss decomposition of one article and the gradient of the weighted
/// total with respect to every student parameter.
///
/// Cross-entropy and KL terms are averaged over rows; terms with weight 0
/// are neither computed nor read from `signals`.
pub fn loss_and_gradients(
    model: &StudentModel,
    article: &Article,
    signals: &TeacherSignals,
    weights: &LossWeights,
    config: &TrainConfig,
) -> Result<(LossReport, Grads)> {
    let encoder = Encoder::new(model.encoder.clone())?;
    let input = encoder.prepare(article)?;
    let gold = targets(article, &input, model.level)?;
    article_loss(model, &encoder, article, &input, &gold, signals, weights, config)
}

#[allow(clippy::too_many_arguments)]
fn article_loss(
    model: &StudentModel,
    encoder: &Encoder,
    article: &Article,
    input: &EncodedInput,
    gold: &[usize],
    signals: &TeacherSignals,
    weights: &LossWeights,
    config: &TrainConfig,
) -> Result<(LossReport, Grads)> {
    let eps = config.epsilon;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let features = match model.mode {
        Mode::Concat => match (&signals.local, &signals.global) {
            (Some((pl, _)), Some((pg, _))) => Some((pl, pg)),
            _ => return Err(Error::MissingTeacherCache(format!("article {}", article.article_id))),
        },
        _ => None,
    };
    let heads = (weights.response_local > 0.0, weights.response_global > 0.0);
    let graph = build_graph(&mut tape, &bound, model, encoder, input, features, heads)?;
    let mut report = LossReport::default();
    let mut seeds = Vec::new();

    if let (Some(q), true) = (graph.propa, weights.propaganda > 0.0) {
        let qv = tape.value(q);
        if qv.nrows() != gold.len() {
            return Err(Error::Alignment(format!(
                "article {}: {} propaganda rows for {} gold labels",
                article.article_id,
                qv.nrows(),
                gold.len()
            )));
        }
        let m = gold.len() as f64;
        let ce = propaganda_ce(qv.view(), gold, eps) / m;
        seeds.push((q, propaganda_ce_grad(qv.view(), gold, eps) * (weights.propaganda / m)));
        match model.level {
            Level::Sentence => report.loss_sent_propa = Some(ce),
            Level::Token => report.loss_token_propa = Some(ce),
        }
    }

    if let Some(sentences) = graph.out.sentences {
        let s_student = tape.value(sentences).clone();
        let n = s_student.nrows();
        fn need<'a>(side: &'a Option<(Array2<f64>, Array2<f64>)>, id: &str, what: &str) -> Result<&'a (Array2<f64>, Array2<f64>)> {
            side.as_ref()
                .ok_or_else(|| Error::MissingTeacherCache(format!("article {id} ({what} teacher)")))
        }
        let kl_terms = [
            (weights.response_local, graph.q_local, &signals.local, "relation"),
            (weights.response_global, graph.q_global, &signals.global, "role"),
        ];
        for (k, (w, q, side, what)) in kl_terms.into_iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let q = q.expect("student head built for a weighted term");
            let p = teacher_rows(&need(side, &article.article_id, what)?.0, n, what)?;
            let qv = tape.value(q);
            let kl = response_kl(p, qv.view(), eps) / n as f64;
            seeds.push((q, response_kl_grad(p, qv.view(), eps) * (w / n as f64)));
            if k == 0 {
                report.loss_response_local = Some(kl);
            } else {
                report.loss_response_global = Some(kl);
            }
        }

        let mut s_grad: Option<Array2<f64>> = None;
        let m_student = (weights.relation_local > 0.0 || weights.relation_global > 0.0).then(|| spatial_matrix(s_student.view()));
        let rel_terms = [
            (weights.relation_local, &signals.local, "relation"),
            (weights.relation_global, &signals.global, "role"),
        ];
        for (k, (w, side, what)) in rel_terms.into_iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let ms = m_student.as_ref().expect("computed when a relation weight is set");
            let mt = spatial_matrix(teacher_rows(&need(side, &article.article_id, what)?.1, n, what)?);
            let loss = relation_mse(mt.view(), ms.view(), config.relation_reduction);
            let gm = relation_mse_grad(mt.view(), ms.view(), config.relation_reduction) * w;
            let gs = spatial_matrix_backward(s_student.view(), gm.view());
            match s_grad.as_mut() {
                Some(acc) => *acc += &gs,
                None => s_grad = Some(gs),
            }
            if k == 0 {
                report.loss_relation_local = Some(loss);
            } else {
                report.loss_relation_global = Some(loss);
            }
        }
        if let Some(g) = s_grad {
            seeds.push((sentences, g));
        }
    }

    report.total = total_loss(&report, weights, model.level)?;
    let mut grads = tape.backward(&seeds);
    Ok((report, bound.collect(&tape, &mut grads)))
}

/// Loads the teacher halves a run reads, with the configured relation
/// ablation applied to `P^local`.
fn load_signals(articles: &[Article], cache: Option<&TeacherCache>, config: &TrainConfig, needs: (bool, bool)) -> Result<Vec<TeacherSignals>> {
    if needs == (false, false) {
        return Ok(vec![TeacherSignals::default(); articles.len()]);
    }
    let cache = cache.ok_or_else(|| {
        Error::MissingTeacherCache(format!("{} mode with these loss weights reads the teacher cache, but none is configured", config.mode))
    })?;
    articles
        .iter()
        .map(|a| {
            let mut sig = cache.signals(&a.article_id, needs.0, needs.1)?;
            if let (Some(r), Some((p, _))) = (config.ablate_relation, sig.local.as_mut()) {
                *p = ablate_relation_probs(p, r);
            }
            Ok(sig)
        })
        .collect()
}

fn evaluate(
    model: &StudentModel,
    encoder: &Encoder,
    articles: &[Article],
    inputs: &[EncodedInput],
    signals: &[TeacherSignals],
) -> Result<MetricsReport> {
    let mut predicted = BTreeMap::new();
    for ((article, input), sig) in articles.iter().zip(inputs).zip(signals) {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let features = match (&sig.local, &sig.global) {
            (Some((pl, _)), Some((pg, _))) if model.mode == Mode::Concat => Some((pl, pg)),
            _ => None,
        };
        let graph = build_graph(&mut tape, &bound, model, encoder, input, features, (false, false))?;
        predicted.extend(assemble_prediction(article, model, &tape, &graph, input).units());
    }
    score(&predicted, &gold_units(articles, model.level)?, model.level)
}

fn add_grads(acc: &mut Option<Grads>, grads: Grads) {
    match acc.as_mut() {
        None => *acc = Some(grads),
        Some(acc) => {
            for (name, g) in grads {
                *acc.get_mut(&name).expect("same parameter set") += &g;
            }
        }
    }
}

/// Trains a student on `train`, selecting the epoch with the best dev
/// propaganda F1 (the last epoch when `dev` is empty).
///
/// Runs are deterministic given `config.seed`. The teacher cache is only
/// read; teacher checkpoints are never touched.
pub fn train_student(
    train: &[Article],
    dev: &[Article],
    cache: Option<&TeacherCache>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("the training split is empty".into()));
    }
    let weights = config.effective_weights();
    let needs = config.teacher_needs();
    let train_signals = load_signals(train, cache, config, needs)?;
    let dev_needs = if config.mode == Mode::Concat { (true, true) } else { (false, false) };
    let dev_signals = load_signals(dev, cache, config, dev_needs)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = StudentModel::init(config, &mut rng)?;
    let encoder = Encoder::new(config.encoder.clone())?;
    let train_inputs: Vec<EncodedInput> = train.iter().map(|a| encoder.prepare(a)).collect::<Result<_>>()?;
    let dev_inputs: Vec<EncodedInput> = dev.iter().map(|a| encoder.prepare(a)).collect::<Result<_>>()?;
    let gold: Vec<Vec<usize>> = train
        .iter()
        .zip(&train_inputs)
        .map(|(a, i)| targets(a, i, config.level))
        .collect::<Result<_>>()?;
    gold_units(dev, config.level)?;

    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let lr = config.learning_rate();
    let mut optimizer = AdamW::new(
        AdamWConfig {
            learning_rate: lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        LinearSchedule {
            base: lr,
            warmup_steps: config.warmup_steps,
            total_steps: steps_per_epoch * config.epochs,
        },
    );

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, crate::params::ParamStore)> = None;
    let mut last_finite: Option<LossReport> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossReport::default();
        for batch in order.chunks(config.batch_size) {
            let mut acc: Option<Grads> = None;
            let mut step = LossReport::default();
            for &i in batch {
                let result = article_loss(
                    &model,
                    &encoder,
                    &train[i],
                    &train_inputs[i],
                    &gold[i],
                    &train_signals[i],
                    &weights,
                    config,
                );
                let (report, grads) = match result {
                    Ok(r) => r,
                    Err(Error::NonFinite { term }) => {
                        return Err(Error::Diverged {
                            epoch,
                            term: term.into(),
                            last_finite: last_finite.map(Box::new),
                        })
                    }
                    Err(e) => return Err(e),
                };
                step.add(&report);
                add_grads(&mut acc, grads);
            }
            let step = step.scaled(1.0 / batch.len() as f64);
            if let Some(mut grads) = acc {
                let scale = 1.0 / batch.len() as f64;
                grads.values_mut().for_each(|g| *g *= scale);
                optimizer.step(&mut model.params, &grads);
            }
            if !model.params.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    term: "parameters".into(),
                    last_finite: Some(Box::new(step)),
                });
            }
            epoch_loss.add(&step.scaled(batch.len() as f64 / train.len() as f64));
            last_finite = Some(step.clone());
            step_losses.push(step);
        }

        let train_metrics = evaluate(&model, &encoder, train, &train_inputs, &train_signals)?;
        let dev_metrics = if dev.is_empty() {
            None
        } else {
            Some(evaluate(&model, &encoder, dev, &dev_inputs, &dev_signals)?)
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, train F1 {:.4}{}",
            epoch_loss.total,
            train_metrics.f1,
            dev_metrics.as_ref().map(|m| format!(", dev F1 {:.4}", m.f1)).unwrap_or_default()
        );
        let candidate = match &dev_metrics {
            Some(m) => best.as_ref().is_none_or(|(b, _, _)| m.f1 > *b).then_some(m.f1),
            None => Some(0.0),
        };
        if let Some(score) = candidate {
            best = Some((score, epoch, model.params.clone()));
        }
        history.push(EpochLog {
            epoch,
            loss: epoch_loss,
            train: train_metrics,
            dev: dev_metrics,
        });
    }

    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
        step_losses,
    })
}
