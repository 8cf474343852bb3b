//! Student models for sentence- and token-level propaganda identification.
//!
//! * `concat` appends the teacher probabilities `P^local ⊕ P^global` to every
//!   sentence (or sub-word) embedding before the propaganda head.
//! * `distill` keeps the propaganda head on the plain embedding and adds a
//!   relation head on `s_{i-1} ⊕ s_i` and a role head on `s_i`, trained to
//!   match the teachers (see [`crate::distill`]).
//! * `baseline` is the distill architecture with every distillation weight
//!   forced to zero.
//!
//! Token-level heads run on sub-word pieces; words take the any-positive
//! rule over their pieces.

mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::corpus::{aggregate_any_positive, Article, Label, Relation, Role};
use crate::distill::{Level, LossWeights, RelationReduction, DEFAULT_EPSILON};
use crate::encoder::{pair_inputs, Backbone, EncodedInput, Encoder, EncoderConfig, EncoderOutput, Scope};
use crate::error::{Error, Result};
use crate::eval::{gold_units, score, MetricsReport, UnitKey};
use crate::fsutil;
use crate::head::{self, HeadActivation, HeadShape};
use crate::params::{Bound, ParamStore};
use crate::teachers::{TeacherCache, TeacherOutputs};

pub use train::{loss_and_gradients, train_student, EpochLog, TrainOutcome};

/// Number of appended teacher features in concat mode.
pub const TEACHER_FEATURES: usize = 4 + 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Concat,
    #[default]
    Distill,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Concat => "concat",
            Mode::Distill => "distill",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(Mode::Baseline),
            "concat" => Ok(Mode::Concat),
            "distill" => Ok(Mode::Distill),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected baseline, concat or distill)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub level: Level,
    pub encoder: EncoderConfig,
    /// Hidden width of every head; the encoder width when absent.
    pub head_hidden: Option<usize>,
    pub activation: HeadActivation,
    pub epochs: usize,
    /// Base rate of the linear schedule; 1e-3 for the toy backbone and 1e-5
    /// for the pretrained one when absent.
    pub learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Articles whose gradients are summed into one optimiser step.
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub relation_reduction: RelationReduction,
    pub epsilon: f64,
    /// Relation column removed from `P^local` before the student reads it.
    pub ablate_relation: Option<Relation>,
    /// A unit is propaganda when its propaganda probability exceeds this.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Distill,
            level: Level::Sentence,
            encoder: EncoderConfig::default(),
            head_hidden: None,
            activation: HeadActivation::Identity,
            epochs: 6,
            learning_rate: None,
            weight_decay: 1e-2,
            warmup_steps: 0,
            batch_size: 1,
            seed: 42,
            weights: LossWeights::default(),
            relation_reduction: RelationReduction::Mean,
            epsilon: DEFAULT_EPSILON,
            ablate_relation: None,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.head_hidden == Some(0) {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        let lr = self.learning_rate();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {lr}")));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1e-3) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1e-3), got {}", self.epsilon)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        Ok(())
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.encoder.backbone {
            Backbone::ToyRandom => 1e-3,
            Backbone::PretrainedLongdoc => 1e-5,
        })
    }

    /// Loss weights actually optimised: only the propaganda term outside
    /// distill mode.
    pub fn effective_weights(&self) -> LossWeights {
        match self.mode {
            Mode::Distill => self.weights,
            Mode::Baseline | Mode::Concat => LossWeights {
                propaganda: self.weights.propaganda,
                ..LossWeights::propaganda_only()
            },
        }
    }

    /// Which teacher halves training reads: `(local, global)`.
    pub fn teacher_needs(&self) -> (bool, bool) {
        match self.mode {
            Mode::Concat => (true, true),
            Mode::Baseline => (false, false),
            Mode::Distill => {
                let w = self.weights;
                (w.uses_local(), w.uses_global())
            }
        }
    }
}

/// Head names and shapes of a student with this configuration.
pub fn head_shapes(mode: Mode, encoder: &EncoderConfig, head_hidden: Option<usize>) -> Vec<(&'static str, HeadShape)> {
    let d = encoder.hidden_dim;
    let h = head_hidden.unwrap_or(d);
    match mode {
        Mode::Concat => vec![(
            "propa",
            HeadShape {
                input: d + TEACHER_FEATURES,
                hidden: h,
                classes: 2,
            },
        )],
        Mode::Baseline | Mode::Distill => vec![
            (
                "propa",
                HeadShape {
                    input: d,
                    hidden: h,
                    classes: 2,
                },
            ),
            (
                "relation_head",
                HeadShape {
                    input: 2 * d,
                    hidden: h,
                    classes: Relation::ALL.len(),
                },
            ),
            (
                "role_head",
                HeadShape {
                    input: d,
                    hidden: h,
                    classes: Role::ALL.len(),
                },
            ),
        ],
    }
}

/// A student checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentModel {
    pub mode: Mode,
    pub level: Level,
    pub encoder: EncoderConfig,
    pub head_hidden: Option<usize>,
    pub activation: HeadActivation,
    pub threshold: f64,
    pub ablate_relation: Option<Relation>,
    pub params: ParamStore,
}

impl StudentModel {
    /// Fresh parameters: the encoder first, then the heads in
    /// [`head_shapes`] order.
    pub fn init<R: Rng>(config: &TrainConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.encoder.clone())?;
        let mut params = ParamStore::new();
        params.merge_prefixed("encoder", encoder.init_params(rng)?);
        for (prefix, shape) in head_shapes(config.mode, &config.encoder, config.head_hidden) {
            shape.init(rng, prefix, &mut params);
        }
        Ok(Self {
            mode: config.mode,
            level: config.level,
            encoder: config.encoder.clone(),
            head_hidden: config.head_hidden,
            activation: config.activation,
            threshold: config.threshold,
            ablate_relation: config.ablate_relation,
            params,
        })
    }

    pub fn heads(&self) -> Vec<(&'static str, HeadShape)> {
        head_shapes(self.mode, &self.encoder, self.head_hidden)
    }

    /// Input width of the propaganda head.
    pub fn propaganda_input_width(&self) -> usize {
        self.heads()[0].1.input
    }

    pub fn check(&self) -> Result<()> {
        let encoder = Encoder::new(self.encoder.clone())?;
        encoder.check_params(&self.params.extract_prefixed("encoder"))?;
        for (prefix, shape) in self.heads() {
            shape.check(prefix, &self.params)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("student checkpoint {} does not exist", path.display())));
        }
        let model: StudentModel = fsutil::read_json(path)?;
        model.check()?;
        Ok(model)
    }

    fn build_encoder(&self) -> Result<Encoder> {
        Encoder::new(self.encoder.clone())
    }
}

/// Zeroes the `relation` column of `p` and renormalises each row. A row
/// left with no mass becomes uniform over the remaining classes.
pub fn ablate_relation_probs(p: &Array2<f64>, relation: Relation) -> Array2<f64> {
    let c = relation.index();
    let k = p.ncols();
    let mut out = p.clone();
    for mut row in out.rows_mut() {
        row[c] = 0.0;
        let sum: f64 = row.sum();
        if sum > 0.0 {
            row /= sum;
        } else {
            row.fill(1.0 / (k - 1) as f64);
            row[c] = 0.0;
        }
    }
    out
}

/// [`ablate_relation_probs`] applied to the local block of `outputs`.
pub fn ablate_relation(outputs: &TeacherOutputs, relation: Relation) -> TeacherOutputs {
    TeacherOutputs {
        p_local: ablate_relation_probs(&outputs.p_local, relation),
        ..outputs.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explanation {
    /// `None` for the first sentence.
    pub relation: Option<Relation>,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordPrediction {
    /// Propaganda probability: the largest over the word's pieces. `None`
    /// when every piece was truncated away.
    pub probability: Option<f64>,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentencePrediction {
    pub index: usize,
    /// `(benign, propaganda)`; `None` for truncated sentences and at token level.
    pub probs: Option<[f64; 2]>,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub words: Vec<WordPrediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<Explanation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub article_id: String,
    pub level: Level,
    pub sentences: Vec<SentencePrediction>,
    /// Per surviving sentence, `(benign, propaganda)` for every sub-word
    /// piece; filled at token level.
    #[serde(skip)]
    pub piece_probs: Vec<Array2<f64>>,
}

impl Prediction {
    /// Hard labels keyed for [`crate::eval::score`].
    pub fn units(&self) -> Vec<(UnitKey, bool)> {
        let mut out = Vec::new();
        for s in &self.sentences {
            match self.level {
                Level::Sentence => out.push((UnitKey::sentence(&self.article_id, s.index), s.label.is_propaganda())),
                Level::Token => {
                    for (t, w) in s.words.iter().enumerate() {
                        out.push((UnitKey::token(&self.article_id, s.index, t), w.label.is_propaganda()));
                    }
                }
            }
        }
        out
    }

    pub fn attach_explanations(&mut self, outputs: &TeacherOutputs) {
        for s in &mut self.sentences {
            s.explanation = outputs.role_argmax(s.index).map(|role| Explanation {
                relation: outputs.relation_argmax(s.index),
                role,
            });
        }
    }
}

/// Student outputs of distill mode on one article.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillOutput {
    pub prediction: Prediction,
    /// `n × 4`.
    pub q_local: Array2<f64>,
    /// `n × 8`.
    pub q_global: Array2<f64>,
    /// `n × d` student sentence embeddings.
    pub sentence_embeddings: Array2<f64>,
}

/// Tape nodes of one student pass.
pub(crate) struct Graph {
    pub out: EncoderOutput,
    /// `n × 2` (sentence level) or `pieces × 2` (token level).
    pub propa: Option<Var>,
    /// Surviving sentence of each propaganda row at token level.
    pub piece_owner: Vec<(usize, usize)>,
    pub q_local: Option<Var>,
    pub q_global: Option<Var>,
}

/// Teacher probability features of the first `n` sentences, `n × 12`.
fn teacher_features(p_local: &Array2<f64>, p_global: &Array2<f64>, n: usize) -> Result<Array2<f64>> {
    if p_local.nrows() < n || p_global.nrows() < n {
        return Err(Error::Alignment(format!(
            "teacher outputs cover {} sentences but the student encodes {n}; re-run cache-teacher with the student's encoder settings",
            p_local.nrows().min(p_global.nrows())
        )));
    }
    Ok(ndarray::concatenate(
        ndarray::Axis(1),
        &[p_local.slice(s![..n, ..]), p_global.slice(s![..n, ..])],
    )
    .expect("equal row counts"))
}

/// Builds the student graph. `features` carries `(P^local, P^global)` and
/// is required in concat mode. `student_heads` adds the relation and role
/// heads (distill architecture only).
pub(crate) fn build_graph(
    tape: &mut Tape,
    bound: &Bound,
    model: &StudentModel,
    encoder: &Encoder,
    input: &EncodedInput,
    features: Option<(&Array2<f64>, &Array2<f64>)>,
    student_heads: (bool, bool),
) -> Result<Graph> {
    let out = encoder.forward(tape, Scope::new(bound, "encoder"), input);
    let root = Scope::new(bound, "");
    let mut graph = Graph {
        out,
        propa: None,
        piece_owner: Vec::new(),
        q_local: None,
        q_global: None,
    };
    let Some(sentences) = graph.out.sentences else {
        return Ok(graph);
    };
    let n = tape.value(sentences).nrows();
    let feats = match model.mode {
        Mode::Concat => {
            let (pl, pg) = features.ok_or_else(|| {
                Error::MissingTeacherCache("concat mode needs teacher probabilities for every article".into())
            })?;
            Some(teacher_features(pl, pg, n)?)
        }
        _ => None,
    };

    let x = match model.level {
        Level::Sentence => Some(match &feats {
            Some(f) => {
                let f = tape.leaf(f.clone());
                tape.concat_cols(&[sentences, f])
            }
            None => sentences,
        }),
        Level::Token => {
            let mut parts = Vec::new();
            for (i, piece) in graph.out.pieces.iter().enumerate() {
                if let Some(p) = piece {
                    let m = tape.value(*p).nrows();
                    graph.piece_owner.extend((0..m).map(|k| (i, k)));
                    parts.push(*p);
                }
            }
            if parts.is_empty() {
                None
            } else {
                let pieces = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts) };
                Some(match &feats {
                    Some(f) => {
                        let rows: Vec<usize> = graph.piece_owner.iter().map(|&(i, _)| i).collect();
                        let f = tape.leaf(f.select(ndarray::Axis(0), &rows));
                        tape.concat_cols(&[pieces, f])
                    }
                    None => pieces,
                })
            }
        }
    };
    graph.propa = x.map(|x| head::probabilities(tape, root, "propa", model.activation, x));

    if model.mode != Mode::Concat {
        if student_heads.0 {
            let pairs = pair_inputs(tape, sentences);
            graph.q_local = Some(head::probabilities(tape, root, "relation_head", model.activation, pairs));
        }
        if student_heads.1 {
            graph.q_global = Some(head::probabilities(tape, root, "role_head", model.activation, sentences));
        }
    }
    Ok(graph)
}

fn is_positive(p: f64, threshold: f64) -> bool {
    p > threshold
}

/// Turns graph values into a [`Prediction`] covering every sentence of
/// `article`; sentences lost to truncation are predicted benign.
fn assemble_prediction(article: &Article, model: &StudentModel, tape: &Tape, graph: &Graph, input: &EncodedInput) -> Prediction {
    let n = input.sentences.len();
    let mut sentences = Vec::with_capacity(article.sentences.len());
    let mut piece_probs = Vec::new();
    match model.level {
        Level::Sentence => {
            let q = graph.propa.map(|v| tape.value(v).clone());
            for s in &article.sentences {
                let probs = q.as_ref().filter(|_| s.index < n).map(|q| [q[[s.index, 0]], q[[s.index, 1]]]);
                let positive = probs.is_some_and(|p| is_positive(p[1], model.threshold));
                sentences.push(SentencePrediction {
                    index: s.index,
                    probs,
                    label: Label::from_bool(positive),
                    words: Vec::new(),
                    explanation: None,
                });
            }
        }
        Level::Token => {
            let q = graph.propa.map(|v| tape.value(v).clone());
            piece_probs = vec![Array2::zeros((0, 2)); n];
            if let Some(q) = &q {
                for i in 0..n {
                    let rows: Vec<usize> = graph
                        .piece_owner
                        .iter()
                        .enumerate()
                        .filter(|(_, &(owner, _))| owner == i)
                        .map(|(r, _)| r)
                        .collect();
                    piece_probs[i] = q.select(ndarray::Axis(0), &rows);
                }
            }
            for s in &article.sentences {
                let words: Vec<WordPrediction> = if s.index < n {
                    let pp = &piece_probs[s.index];
                    let alignment = &input.sentences[s.index].alignment;
                    let positive: Vec<bool> = pp.column(1).iter().map(|&p| is_positive(p, model.threshold)).collect();
                    let labels = aggregate_any_positive(alignment, &positive);
                    alignment
                        .iter()
                        .zip(labels)
                        .map(|(pieces, label)| WordPrediction {
                            probability: pieces
                                .iter()
                                .filter_map(|&k| pp.get([k, 1]).copied())
                                .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.max(p)))),
                            label: Label::from_bool(label),
                        })
                        .collect()
                } else {
                    s.tokens
                        .iter()
                        .map(|_| WordPrediction {
                            probability: None,
                            label: Label::Benign,
                        })
                        .collect()
                };
                let any = words.iter().any(|w| w.label.is_propaganda());
                sentences.push(SentencePrediction {
                    index: s.index,
                    probs: None,
                    label: Label::from_bool(any),
                    words,
                    explanation: None,
                });
            }
        }
    }
    Prediction {
        article_id: article.article_id.clone(),
        level: model.level,
        sentences,
        piece_probs,
    }
}

/// Concat-mode forward pass with the article's teacher outputs.
pub fn forward_concat(article: &Article, outputs: &TeacherOutputs, model: &StudentModel) -> Result<Prediction> {
    if model.mode != Mode::Concat {
        return Err(Error::Config(format!("forward_concat called with a {} model", model.mode)));
    }
    let encoder = model.build_encoder()?;
    let input = encoder.prepare(article)?;
    let p_local = match model.ablate_relation {
        Some(r) => ablate_relation_probs(&outputs.p_local, r),
        None => outputs.p_local.clone(),
    };
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let graph = build_graph(
        &mut tape,
        &bound,
        model,
        &encoder,
        &input,
        Some((&p_local, &outputs.p_global)),
        (false, false),
    )?;
    Ok(assemble_prediction(article, model, &tape, &graph, &input))
}

/// Distill-architecture forward pass (distill and baseline modes).
pub fn forward_distill(article: &Article, model: &StudentModel) -> Result<DistillOutput> {
    if model.mode == Mode::Concat {
        return Err(Error::Config("forward_distill called with a concat model".into()));
    }
    let encoder = model.build_encoder()?;
    let input = encoder.prepare(article)?;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let graph = build_graph(&mut tape, &bound, model, &encoder, &input, None, (true, true))?;
    let d = model.encoder.hidden_dim;
    let value = |v: Option<Var>, k: usize| v.map(|v| tape.value(v).clone()).unwrap_or_else(|| Array2::zeros((0, k)));
    Ok(DistillOutput {
        prediction: assemble_prediction(article, model, &tape, &graph, &input),
        q_local: value(graph.q_local, Relation::ALL.len()),
        q_global: value(graph.q_global, Role::ALL.len()),
        sentence_embeddings: value(graph.out.sentences, d),
    })
}

/// Predicts one article. Concat models need the teacher cache; with a
/// cache that holds the article, each sentence carries the teachers'
/// argmax relation and role.
pub fn predict(article: &Article, model: &StudentModel, cache: Option<&TeacherCache>) -> Result<Prediction> {
    let outputs = match cache {
        Some(c) if c.contains(&article.article_id) => Some(c.outputs(&article.article_id)?),
        _ => None,
    };
    predict_with(article, model, outputs.as_ref())
}

/// [`predict`] with teacher outputs supplied directly.
pub fn predict_with(article: &Article, model: &StudentModel, outputs: Option<&TeacherOutputs>) -> Result<Prediction> {
    let mut prediction = match model.mode {
        Mode::Concat => {
            let outputs = outputs.ok_or_else(|| {
                Error::MissingTeacherCache(format!("article {} (concat model)", article.article_id))
            })?;
            forward_concat(article, outputs, model)?
        }
        Mode::Baseline | Mode::Distill => forward_distill(article, model)?.prediction,
    };
    if let Some(o) = outputs {
        prediction.attach_explanations(o);
    }
    Ok(prediction)
}

/// Scores `model` on labeled `articles` at the model's level.
pub fn evaluate(model: &StudentModel, articles: &[Article], cache: Option<&TeacherCache>) -> Result<MetricsReport> {
    if articles.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty split".into()));
    }
    let mut predicted = BTreeMap::new();
    for a in articles {
        predicted.extend(predict(a, model, cache)?.units());
    }
    score(&predicted, &gold_units(articles, model.level)?, model.level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ablation_examples() {
        let p = array![[0.1, 0.2, 0.3, 0.4]];
        let out = ablate_relation_probs(&p, Relation::Temporal);
        let expected = [0.1 / 0.7, 0.2 / 0.7, 0.0, 0.4 / 0.7];
        for (a, b) in out.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = array![[0.5, 0.5, 0.0, 0.0]];
        assert_eq!(ablate_relation_probs(&p, Relation::Expansion), p);
        let p = array![[0.0, 0.0, 1.0, 0.0]];
        let out = ablate_relation_probs(&p, Relation::Temporal);
        assert_eq!(out.row(0).to_vec(), vec![1.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0]);
    }

    #[test]
    fn concat_width_is_d_plus_twelve() {
        for d in [8, 16, 768] {
            let enc = EncoderConfig {
                hidden_dim: d,
                ..EncoderConfig::default()
            };
            assert_eq!(head_shapes(Mode::Concat, &enc, None)[0].1.input, d + 12);
            assert_eq!(head_shapes(Mode::Distill, &enc, None)[1].1.input, 2 * d);
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("Distill".parse::<Mode>().unwrap(), Mode::Distill);
        assert!("both".parse::<Mode>().is_err());
    }

    #[test]
    fn baseline_trains_propaganda_only() {
        let c = TrainConfig {
            mode: Mode::Baseline,
            ..TrainConfig::default()
        };
        assert!(!c.effective_weights().uses_teachers());
        assert_eq!(c.teacher_needs(), (false, false));
    }
}
