//! The two frozen teachers.
//!
//! The relation teacher classifies the pair `s_{i-1} ⊕ s_i` into one of four
//! top-level PDTB senses; the role teacher classifies `s_i` into one of the
//! eight news discourse roles. Each owns a private encoder and a two-layer
//! head, both trained with cross-entropy and then frozen.

mod cache;

use std::fmt;
use std::ops::Deref;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::corpus::{Article, Relation, RelationPair, Role, RoleDocument, Split};
use crate::distill::{propaganda_ce, propaganda_ce_grad, DEFAULT_EPSILON};
use crate::encoder::{pair_inputs, EncodedInput, Encoder, EncoderConfig, Scope};
use crate::error::{Error, Result};
use crate::eval::{accuracy, macro_f1};
use crate::fsutil::{self, rows};
use crate::head::{self, HeadActivation, HeadShape};
use crate::optim::{AdamW, AdamWConfig, LinearSchedule};
use crate::params::{Bound, ParamStore};

pub use cache::{cache_teacher_outputs, CacheEntry, CacheManifest, TeacherCache};

/// Tolerance on the row sums of probability blocks.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Relation,
    Role,
}

impl TeacherKind {
    pub fn num_classes(self) -> usize {
        match self {
            TeacherKind::Relation => Relation::ALL.len(),
            TeacherKind::Role => Role::ALL.len(),
        }
    }

    /// Width of the head input for an encoder of width `d`.
    pub fn head_input(self, d: usize) -> usize {
        match self {
            TeacherKind::Relation => 2 * d,
            TeacherKind::Role => d,
        }
    }

    fn class_name(self, c: usize) -> String {
        match self {
            TeacherKind::Relation => Relation::from_index(c).map(|r| r.to_string()),
            TeacherKind::Role => Role::from_index(c).map(|r| r.to_string()),
        }
        .unwrap_or_else(|| c.to_string())
    }
}

impl fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TeacherKind::Relation => "relation",
            TeacherKind::Role => "role",
        })
    }
}

impl FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relation" | "local" => Ok(TeacherKind::Relation),
            "role" | "global" => Ok(TeacherKind::Role),
            other => Err(Error::Config(format!("unknown teacher kind `{other}` (expected relation or role)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub encoder: EncoderConfig,
    /// Hidden width of the head; the encoder width when absent.
    pub head_hidden: Option<usize>,
    pub activation: HeadActivation,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Training examples per optimiser step.
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head_hidden: None,
            activation: HeadActivation::Identity,
            epochs: 20,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            batch_size: 8,
            warmup_steps: 0,
            seed: 13,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("teacher epochs and batch_size must be positive".into()));
        }
        if self.head_hidden == Some(0) {
            return Err(Error::Config("teacher head_hidden must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("teacher learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("teacher weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }

    fn head_shape(&self, kind: TeacherKind) -> HeadShape {
        let d = self.encoder.hidden_dim;
        HeadShape {
            input: kind.head_input(d),
            hidden: self.head_hidden.unwrap_or(d),
            classes: kind.num_classes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_macro_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_macro_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub best_epoch: usize,
    /// `dev`, or `train` when no dev data was given.
    pub selected_on: String,
    pub best_macro_f1: f64,
    pub history: Vec<EpochRecord>,
}

/// Macro-F1 and accuracy of a teacher on labeled data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherMetrics {
    pub macro_f1: f64,
    pub accuracy: f64,
    pub examples: usize,
}

/// A trained teacher: encoder parameters under `encoder.`, head parameters
/// under `head.`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    pub kind: TeacherKind,
    pub encoder: EncoderConfig,
    pub head: HeadShape,
    pub activation: HeadActivation,
    pub params: ParamStore,
    pub summary: Option<TrainingSummary>,
}

/// Probabilities and sentence embeddings of one teacher on one article.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherPass {
    pub probs: Array2<f64>,
    pub embeddings: Array2<f64>,
    pub truncated: bool,
}

fn forward_teacher(
    tape: &mut Tape,
    bound: &Bound,
    kind: TeacherKind,
    encoder: &Encoder,
    activation: HeadActivation,
    input: &EncodedInput,
) -> Option<(Var, Var)> {
    let out = encoder.forward(tape, Scope::new(bound, "encoder"), input);
    let sentences = out.sentences?;
    let x = match kind {
        TeacherKind::Relation => pair_inputs(tape, sentences),
        TeacherKind::Role => sentences,
    };
    let probs = head::probabilities(tape, Scope::new(bound, ""), "head", activation, x);
    Some((probs, sentences))
}

impl Teacher {
    /// Identifies the exact checkpoint: architecture and parameter bits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind.to_string().as_bytes());
        h.update(serde_json::to_vec(&self.encoder).expect("config serialises"));
        h.update(serde_json::to_vec(&(self.head, self.activation)).expect("head serialises"));
        h.update(self.params.content_hash().as_bytes());
        hex::encode(h.finalize())
    }

    /// Checks that parameters, encoder and head agree on every dimension.
    pub fn check(&self) -> Result<()> {
        let encoder = Encoder::new(self.encoder.clone())?;
        encoder.check_params(&self.params.extract_prefixed("encoder"))?;
        let expected = self.kind.head_input(self.encoder.hidden_dim);
        if self.head.input != expected || self.head.classes != self.kind.num_classes() {
            return Err(Error::Config(format!(
                "{} teacher head expects input {} and {} classes, but the encoder gives {expected} and the task has {}",
                self.kind,
                self.head.input,
                self.head.classes,
                self.kind.num_classes()
            )));
        }
        self.head.check("head", &self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("teacher checkpoint {} does not exist", path.display())));
        }
        let teacher: Teacher = fsutil::read_json(path)?;
        teacher.check()?;
        Ok(teacher)
    }

    /// Runs the frozen teacher over one article. Rows cover the sentences
    /// that survive truncation.
    pub fn run(&self, article: &Article) -> Result<TeacherPass> {
        let encoder = Encoder::new(self.encoder.clone())?;
        let input = encoder.prepare(article)?;
        Ok(self.run_prepared(&encoder, &input))
    }

    fn run_prepared(&self, encoder: &Encoder, input: &EncodedInput) -> TeacherPass {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        match forward_teacher(&mut tape, &bound, self.kind, encoder, self.activation, input) {
            Some((p, s)) => TeacherPass {
                probs: tape.value(p).clone(),
                embeddings: tape.value(s).clone(),
                truncated: input.truncated,
            },
            None => TeacherPass {
                probs: Array2::zeros((0, self.kind.num_classes())),
                embeddings: Array2::zeros((0, self.encoder.hidden_dim)),
                truncated: input.truncated,
            },
        }
    }

    fn evaluate_examples(&self, examples: &[Example]) -> Result<TeacherMetrics> {
        let encoder = Encoder::new(self.encoder.clone())?;
        let mut gold = Vec::new();
        let mut predicted = Vec::new();
        for ex in examples {
            let input = encoder.prepare(&ex.article)?;
            let pass = self.run_prepared(&encoder, &input);
            for &(row, class) in &ex.targets {
                if row < pass.probs.nrows() {
                    gold.push(class);
                    predicted.push(argmax(pass.probs.row(row)));
                }
            }
        }
        Ok(TeacherMetrics {
            macro_f1: macro_f1(&gold, &predicted, self.kind.num_classes()),
            accuracy: accuracy(&gold, &predicted),
            examples: gold.len(),
        })
    }
}

macro_rules! teacher_newtype {
    ($name:ident, $kind:expr) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Teacher);

        impl $name {
            pub fn new(teacher: Teacher) -> Result<Self> {
                if teacher.kind != $kind {
                    return Err(Error::Config(format!(
                        "expected a {} teacher checkpoint, found a {} teacher",
                        $kind, teacher.kind
                    )));
                }
                teacher.check()?;
                Ok(Self(teacher))
            }

            pub fn load(path: &Path) -> Result<Self> {
                Self::new(Teacher::load(path)?)
            }

            pub fn into_inner(self) -> Teacher {
                self.0
            }
        }

        impl Deref for $name {
            type Target = Teacher;

            fn deref(&self) -> &Teacher {
                &self.0
            }
        }
    };
}

teacher_newtype!(RelationTeacher, TeacherKind::Relation);
teacher_newtype!(RoleTeacher, TeacherKind::Role);

impl RelationTeacher {
    pub fn evaluate(&self, pairs: &[RelationPair]) -> Result<TeacherMetrics> {
        self.evaluate_examples(&relation_examples(pairs.iter().enumerate())?)
    }
}

impl RoleTeacher {
    pub fn evaluate(&self, docs: &[RoleDocument]) -> Result<TeacherMetrics> {
        self.evaluate_examples(&role_examples(docs.iter())?)
    }
}

/// Index of the first maximal entry.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One training article with `(sentence row, class)` targets.
#[derive(Clone, Debug)]
struct Example {
    article: Article,
    targets: Vec<(usize, usize)>,
}

fn relation_examples<'a>(pairs: impl Iterator<Item = (usize, &'a RelationPair)>) -> Result<Vec<Example>> {
    pairs
        .map(|(i, p)| {
            let article = Article::from_segments(format!("pair-{i}"), &[&p.arg1_text, &p.arg2_text], p.split)?;
            Ok(Example {
                article,
                targets: vec![(1, p.relation.index())],
            })
        })
        .collect()
}

fn role_examples<'a>(docs: impl Iterator<Item = &'a RoleDocument>) -> Result<Vec<Example>> {
    docs.map(|d| {
        let texts: Vec<&str> = d.sentences.iter().map(|(t, _)| t.as_str()).collect();
        let article = Article::from_segments(d.doc_id.clone(), &texts, d.split)?;
        Ok(Example {
            article,
            targets: d.sentences.iter().enumerate().map(|(i, (_, r))| (i, r.index())).collect(),
        })
    })
    .collect()
}

/// Trains the relation teacher on the train split of `pairs`, selecting
/// the epoch with the best dev macro-F1.
pub fn train_relation_teacher(pairs: &[RelationPair], config: &TeacherConfig) -> Result<RelationTeacher> {
    let split = |s: Split| relation_examples(pairs.iter().enumerate().filter(move |(_, p)| p.split == s));
    let teacher = train_teacher(TeacherKind::Relation, &split(Split::Train)?, &split(Split::Dev)?, config)?;
    RelationTeacher::new(teacher)
}

/// Trains the role teacher on the train split of `docs`, selecting the
/// epoch with the best dev macro-F1.
pub fn train_role_teacher(docs: &[RoleDocument], config: &TeacherConfig) -> Result<RoleTeacher> {
    let split = |s: Split| role_examples(docs.iter().filter(move |d| d.split == s));
    let teacher = train_teacher(TeacherKind::Role, &split(Split::Train)?, &split(Split::Dev)?, config)?;
    RoleTeacher::new(teacher)
}

fn train_teacher(kind: TeacherKind, train: &[Example], dev: &[Example], config: &TeacherConfig) -> Result<Teacher> {
    config.validate()?;
    let k = kind.num_classes();
    let mut counts = vec![0usize; k];
    for ex in train {
        for &(_, c) in &ex.targets {
            counts[c] += 1;
        }
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Validation(format!(
            "{kind} teacher: class {} has no training examples; every class must occur in the training split",
            kind.class_name(empty)
        )));
    }

    let encoder = Encoder::new(config.encoder.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamStore::new();
    params.merge_prefixed("encoder", encoder.init_params(&mut rng)?);
    let shape = config.head_shape(kind);
    shape.init(&mut rng, "head", &mut params);

    let inputs: Vec<EncodedInput> = train.iter().map(|ex| encoder.prepare(&ex.article)).collect::<Result<_>>()?;
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let mut optimizer = AdamW::new(
        AdamWConfig {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        LinearSchedule {
            base: config.learning_rate,
            warmup_steps: config.warmup_steps,
            total_steps: steps_per_epoch * config.epochs,
        },
    );

    let mut teacher = Teacher {
        kind,
        encoder: config.encoder.clone(),
        head: shape,
        activation: config.activation,
        params,
        summary: None,
    };
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let selected_on = if dev.is_empty() { "train" } else { "dev" };

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut accum: Option<std::collections::BTreeMap<String, Array2<f64>>> = None;
            for &i in batch {
                let (loss, grads) = example_gradients(&teacher, &encoder, &inputs[i], &train[i].targets, batch.len());
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        term: format!("{kind} teacher cross-entropy"),
                        last_finite: None,
                    });
                }
                epoch_loss += loss;
                match accum.as_mut() {
                    None => accum = Some(grads),
                    Some(acc) => {
                        for (name, g) in grads {
                            *acc.get_mut(&name).expect("same parameter set") += &g;
                        }
                    }
                }
            }
            if let Some(grads) = accum {
                optimizer.step(&mut teacher.params, &grads);
            }
        }
        let train_f1 = teacher.evaluate_examples(train)?.macro_f1;
        let dev_f1 = if dev.is_empty() {
            None
        } else {
            Some(teacher.evaluate_examples(dev)?.macro_f1)
        };
        let score = dev_f1.unwrap_or(train_f1);
        log::info!(
            "{kind} teacher epoch {epoch}: loss {:.4}, train macro-F1 {train_f1:.4}{}",
            epoch_loss / train.len().max(1) as f64,
            dev_f1.map(|f| format!(", dev macro-F1 {f:.4}")).unwrap_or_default()
        );
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len().max(1) as f64,
            train_macro_f1: train_f1,
            dev_macro_f1: dev_f1,
        });
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, teacher.params.clone()));
        }
    }

    let (best_macro_f1, best_epoch, params) = best.expect("at least one epoch");
    teacher.params = params;
    teacher.summary = Some(TrainingSummary {
        best_epoch,
        selected_on: selected_on.into(),
        best_macro_f1,
        history,
    });
    Ok(teacher)
}

/// Mean cross-entropy over the targeted rows of one example, and its
/// gradient divided by `batch`.
fn example_gradients(
    teacher: &Teacher,
    encoder: &Encoder,
    input: &EncodedInput,
    targets: &[(usize, usize)],
    batch: usize,
) -> (f64, std::collections::BTreeMap<String, Array2<f64>>) {
    let mut tape = Tape::new();
    let bound = teacher.params.bind(&mut tape);
    let forward = forward_teacher(&mut tape, &bound, teacher.kind, encoder, teacher.activation, input);
    let mut seeds = Vec::new();
    let mut loss = 0.0;
    if let Some((probs, _)) = forward {
        let n = tape.value(probs).nrows();
        let kept: Vec<(usize, usize)> = targets.iter().copied().filter(|&(r, _)| r < n).collect();
        if !kept.is_empty() {
            let rows: Vec<usize> = kept.iter().map(|&(r, _)| r).collect();
            let gold: Vec<usize> = kept.iter().map(|&(_, c)| c).collect();
            let q = tape.gather_rows(probs, &rows);
            let denom = kept.len() as f64;
            loss = propaganda_ce(tape.value(q).view(), &gold, DEFAULT_EPSILON) / denom;
            let g = propaganda_ce_grad(tape.value(q).view(), &gold, DEFAULT_EPSILON) / (denom * batch as f64);
            seeds.push((q, g));
        }
    }
    let mut grads = tape.backward(&seeds);
    (loss, bound.collect(&tape, &mut grads))
}

/// Teacher probabilities and embeddings of one article.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherOutputs {
    pub article_id: String,
    /// `n × 4`; row 0 is uniform.
    #[serde(with = "rows")]
    pub p_local: Array2<f64>,
    /// `n × 8`.
    #[serde(with = "rows")]
    pub p_global: Array2<f64>,
    /// Relation-teacher sentence embeddings, `n × d`.
    #[serde(with = "rows")]
    pub s_local: Array2<f64>,
    /// Role-teacher sentence embeddings, `n × d`.
    #[serde(with = "rows")]
    pub s_global: Array2<f64>,
    pub teacher_hash: String,
}

/// Hash of a teacher pair, as recorded in cache records.
pub fn combined_hash(relation_hash: &str, role_hash: &str) -> String {
    hex::encode(Sha256::digest(format!("{relation_hash}:{role_hash}").as_bytes()))
}

fn check_stochastic(name: &str, p: &Array2<f64>) -> Result<()> {
    for (i, row) in p.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOLERANCE || row.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Validation(format!("{name} row {i} is not a probability distribution (sum {sum})")));
        }
    }
    Ok(())
}

impl TeacherOutputs {
    pub fn num_sentences(&self) -> usize {
        self.p_local.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_sentences();
        let shapes = [
            ("p_local", self.p_local.nrows(), self.p_local.ncols(), Some(Relation::ALL.len())),
            ("p_global", self.p_global.nrows(), self.p_global.ncols(), Some(Role::ALL.len())),
            ("s_local", self.s_local.nrows(), self.s_local.ncols(), None),
            ("s_global", self.s_global.nrows(), self.s_global.ncols(), None),
        ];
        for (name, rows, cols, want) in shapes {
            if rows != n || want.is_some_and(|k| n > 0 && cols != k) {
                return Err(Error::Validation(format!(
                    "teacher outputs of {}: {name} is {rows} × {cols}, expected {n} rows{}",
                    self.article_id,
                    want.map(|k| format!(" of width {k}")).unwrap_or_default()
                )));
            }
        }
        check_stochastic("p_local", &self.p_local)?;
        check_stochastic("p_global", &self.p_global)
    }

    /// Relation-teacher argmax; `None` for the first sentence, which has no
    /// preceding sentence.
    pub fn relation_argmax(&self, i: usize) -> Option<Relation> {
        (i > 0 && i < self.num_sentences()).then(|| Relation::from_index(argmax(self.p_local.row(i))).expect("4 columns"))
    }

    pub fn role_argmax(&self, i: usize) -> Option<Role> {
        (i < self.num_sentences()).then(|| Role::from_index(argmax(self.p_global.row(i))).expect("8 columns"))
    }
}

/// Runs both frozen teachers over `article`. When the teachers' encoders
/// keep different numbers of sentences, the shorter count is used.
pub fn infer_teacher_outputs(article: &Article, rel: &RelationTeacher, role: &RoleTeacher) -> Result<TeacherOutputs> {
    let local = rel.run(article)?;
    let global = role.run(article)?;
    let n = local.probs.nrows().min(global.probs.nrows());
    let mut p_local = local.probs.slice(s![..n, ..]).to_owned();
    if n > 0 {
        p_local.row_mut(0).fill(1.0 / Relation::ALL.len() as f64);
    }
    Ok(TeacherOutputs {
        article_id: article.article_id.clone(),
        p_local,
        p_global: global.probs.slice(s![..n, ..]).to_owned(),
        s_local: local.embeddings.slice(s![..n, ..]).to_owned(),
        s_global: global.embeddings.slice(s![..n, ..]).to_owned(),
        teacher_hash: combined_hash(&rel.hash(), &role.hash()),
    })
}

/// The parts of the teacher outputs one training run actually reads.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TeacherSignals {
    /// `(P^local, s^local)`.
    pub local: Option<(Array2<f64>, Array2<f64>)>,
    /// `(P^global, s^global)`.
    pub global: Option<(Array2<f64>, Array2<f64>)>,
}

impl TeacherSignals {
    pub fn from_outputs(outputs: TeacherOutputs, local: bool, global: bool) -> Self {
        Self {
            local: local.then_some((outputs.p_local, outputs.s_local)),
            global: global.then_some((outputs.p_global, outputs.s_global)),
        }
    }
}
