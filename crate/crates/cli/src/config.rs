//! Run configuration: a TOML file, environment overrides, `--set` overrides
//! and dedicated flags, applied in that order.

use std::fs;
use std::path::{Path, PathBuf};

use discoprop::corpus::Relation;
use discoprop::distill::{Level, LossWeights, RelationReduction, DEFAULT_EPSILON};
use discoprop::encoder::EncoderConfig;
use discoprop::head::HeadActivation;
use discoprop::student::{Mode, TrainConfig};
use discoprop::teachers::TeacherConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

/// Prefix of environment overrides; `__` separates nested keys, so
/// `DISCOPROP_TRAIN__EPOCHS=3` sets `train.epochs`.
pub const ENV_PREFIX: &str = "DISCOPROP_";
pub const ENV_SEPARATOR: &str = "__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds teacher training, student initialisation and shuffling.
    pub seed: u64,
    /// Run directory name under `paths.output`; derived from mode, level
    /// and seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub paths: Paths,
    pub encoder: EncoderConfig,
    pub teacher: TeacherSection,
    pub train: TrainSection,
    pub loss: LossSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory of `<article_id>.txt` files.
    pub articles: PathBuf,
    /// `article_id \t start \t end` gold propaganda spans.
    pub spans: PathBuf,
    /// Optional `article_id \t sentence_index \t label` rows overriding
    /// sentence labels.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sentence_labels: Option<PathBuf>,
    /// `article_id \t split` manifest.
    pub splits: PathBuf,
    pub relation_corpus: PathBuf,
    pub role_corpus: PathBuf,
    pub relation_teacher: PathBuf,
    pub role_teacher: PathBuf,
    pub cache: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            articles: "data/articles".into(),
            spans: "data/spans.tsv".into(),
            sentence_labels: None,
            splits: "data/splits.tsv".into(),
            relation_corpus: "data/relations.jsonl".into(),
            role_corpus: "data/roles.jsonl".into(),
            relation_teacher: "runs/teachers/relation.ckpt".into(),
            role_teacher: "runs/teachers/role.ckpt".into(),
            cache: "runs/cache".into(),
            output: "runs".into(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.articles,
            &mut self.spans,
            &mut self.splits,
            &mut self.relation_corpus,
            &mut self.role_corpus,
            &mut self.relation_teacher,
            &mut self.role_teacher,
            &mut self.cache,
            &mut self.output,
        ] {
            fix(p);
        }
        if let Some(p) = self.sentence_labels.as_mut() {
            fix(p);
        }
    }
}

/// Teacher training settings; teachers use the `[encoder]` section unless
/// `teacher.encoder` is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_hidden: Option<usize>,
    pub activation: HeadActivation,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let t = TeacherConfig::default();
        Self {
            encoder: None,
            head_hidden: t.head_hidden,
            activation: t.activation,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            warmup_steps: t.warmup_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: Mode,
    pub level: Level,
    pub epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_hidden: Option<usize>,
    pub activation: HeadActivation,
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablate_relation: Option<Relation>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: t.mode,
            level: t.level,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            warmup_steps: t.warmup_steps,
            batch_size: t.batch_size,
            head_hidden: t.head_hidden,
            activation: t.activation,
            threshold: t.threshold,
            ablate_relation: t.ablate_relation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub weights: LossWeights,
    pub relation_loss_reduction: RelationReduction,
    pub epsilon: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            relation_loss_reduction: RelationReduction::Mean,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            run_id: None,
            paths: Paths::default(),
            encoder: EncoderConfig::default(),
            teacher: TeacherSection::default(),
            train: TrainSection::default(),
            loss: LossSection::default(),
        }
    }
}

/// One loss term switched off by `--ablate-loss`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum LossTerm {
    ResponseLocal,
    ResponseGlobal,
    RelationLocal,
    RelationGlobal,
    /// Both local terms.
    Local,
    /// Both global terms.
    Global,
    /// All four distillation terms.
    Distillation,
}

impl LossTerm {
    fn keys(self) -> &'static [&'static str] {
        match self {
            LossTerm::ResponseLocal => &["response_local"],
            LossTerm::ResponseGlobal => &["response_global"],
            LossTerm::RelationLocal => &["relation_local"],
            LossTerm::RelationGlobal => &["relation_global"],
            LossTerm::Local => &["response_local", "relation_local"],
            LossTerm::Global => &["response_global", "relation_global"],
            LossTerm::Distillation => &["response_local", "relation_local", "response_global", "relation_global"],
        }
    }
}

/// Overrides gathered from the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    /// `key.path=value` assignments.
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub level: Option<Level>,
    pub ablate_loss: Vec<LossTerm>,
    pub ablate_relation: Option<Relation>,
}

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()))
}

fn set_path(table: &mut Table, path: &str, value: Value) -> Result<(), CliError> {
    let keys: Vec<&str> = path.split('.').map(str::trim).collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("malformed override key `{path}`")));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut cursor = table;
    for key in parents {
        let entry = cursor
            .entry(key.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{path}`: `{key}` is not a table")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

/// `(key.path, value)` pairs from `DISCOPROP_*` variables.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((rest.to_ascii_lowercase().replace(ENV_SEPARATOR, "."), v))
        })
        .collect();
    out.sort();
    out
}

impl RunConfig {
    /// Loads `path` (or the defaults when `None`) and applies environment,
    /// `--set` and flag overrides. Relative paths are resolved against the
    /// config file's directory.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &Overrides,
    ) -> Result<Self, CliError> {
        let (mut table, base) = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("reading config {}: {e}", p.display())))?;
                let table: Table = text
                    .parse()
                    .map_err(|e| CliError::Config(format!("parsing config {}: {e}", p.display())))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (table, base)
            }
            None => (Table::new(), PathBuf::new()),
        };
        for (key, raw) in env_overrides(env) {
            set_path(&mut table, &key, parse_value(&raw))?;
        }
        for assignment in &overrides.set {
            let (key, raw) = assignment
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{assignment}`")))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let mut config: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("invalid configuration: {e}")))?;
        config.apply_flags(overrides);
        config.paths.resolve(&base);
        for enc in std::iter::once(&mut config.encoder).chain(config.teacher.encoder.as_mut()) {
            if let Some(p) = enc.pretrained_path.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    fn apply_flags(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(mode) = o.mode {
            self.train.mode = mode;
        }
        if let Some(level) = o.level {
            self.train.level = level;
        }
        if o.ablate_relation.is_some() {
            self.train.ablate_relation = o.ablate_relation;
        }
        for term in &o.ablate_loss {
            for key in term.keys() {
                let w = &mut self.loss.weights;
                match *key {
                    "response_local" => w.response_local = 0.0,
                    "response_global" => w.response_global = 0.0,
                    "relation_local" => w.relation_local = 0.0,
                    _ => w.relation_global = 0.0,
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train_config().validate()?;
        self.teacher_config().validate()?;
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return Err(CliError::Config(format!("run_id `{id}` is not a plain directory name")));
            }
        }
        Ok(())
    }

    pub fn run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("{}-{}-seed{}", self.train.mode, self.train.level, self.seed))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.paths.output.join(self.run_id())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            mode: t.mode,
            level: t.level,
            encoder: self.encoder.clone(),
            head_hidden: t.head_hidden,
            activation: t.activation,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            warmup_steps: t.warmup_steps,
            batch_size: t.batch_size,
            seed: self.seed,
            weights: self.loss.weights,
            relation_reduction: self.loss.relation_loss_reduction,
            epsilon: self.loss.epsilon,
            ablate_relation: t.ablate_relation,
            threshold: t.threshold,
        }
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        let t = &self.teacher;
        TeacherConfig {
            encoder: t.encoder.clone().unwrap_or_else(|| self.encoder.clone()),
            head_hidden: t.head_hidden,
            activation: t.activation,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            warmup_steps: t.warmup_steps,
            seed: self.seed,
        }
    }

    /// The resolved configuration as TOML; loading it back yields `self`.
    pub fn snapshot(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(format!("serialising config: {e}")))
    }
}
