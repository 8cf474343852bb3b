use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use discoprop::corpus::{
    apply_sentence_labels, load_propaganda_corpus, load_relation_corpus, load_role_corpus, Article, Label, Split,
};
use discoprop::eval::{ratio_analysis, MetricsReport, RatioAxis, RatioTable};
use discoprop::student::{evaluate, predict_with, train_student, Mode, StudentModel};
use discoprop::teachers::{
    cache_teacher_outputs, infer_teacher_outputs, train_relation_teacher, train_role_teacher, RelationTeacher,
    RoleTeacher, TeacherCache, TeacherKind, TeacherMetrics, TrainingSummary,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn io_err(what: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{what} {}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err("creating", dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err("writing", path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| CliError::Input(format!("serialising output: {e}")))
}

pub fn load_articles(config: &RunConfig) -> Result<Vec<Article>> {
    let p = &config.paths;
    let mut articles = load_propaganda_corpus(&p.articles, &p.spans, &p.splits)?;
    if let Some(labels) = &p.sentence_labels {
        apply_sentence_labels(&mut articles, labels)?;
    }
    Ok(articles)
}

fn in_split(articles: &[Article], split: Split) -> Vec<Article> {
    articles.iter().filter(|a| a.split == split).cloned().collect()
}

#[derive(Serialize)]
struct TeacherReport {
    kind: TeacherKind,
    hash: String,
    checkpoint: PathBuf,
    summary: Option<TrainingSummary>,
    dev: Option<TeacherMetrics>,
    test: Option<TeacherMetrics>,
}

/// Trains one teacher and writes its checkpoint plus `<checkpoint>.metrics.json`.
pub fn train_teacher(config: &RunConfig, kind: TeacherKind, out: &mut dyn Write) -> Result<PathBuf> {
    let tc = config.teacher_config();
    let report = match kind {
        TeacherKind::Relation => {
            let pairs = load_relation_corpus(&config.paths.relation_corpus)?;
            let teacher = train_relation_teacher(&pairs, &tc)?;
            let eval = |split| {
                let subset: Vec<_> = pairs.iter().filter(|p| p.split == split).cloned().collect();
                (!subset.is_empty()).then(|| teacher.evaluate(&subset)).transpose()
            };
            let path = config.paths.relation_teacher.clone();
            teacher.save(&path)?;
            TeacherReport {
                kind,
                hash: teacher.hash(),
                summary: teacher.summary.clone(),
                dev: eval(Split::Dev)?,
                test: eval(Split::Test)?,
                checkpoint: path,
            }
        }
        TeacherKind::Role => {
            let docs = load_role_corpus(&config.paths.role_corpus)?;
            let teacher = train_role_teacher(&docs, &tc)?;
            let eval = |split| {
                let subset: Vec<_> = docs.iter().filter(|d| d.split == split).cloned().collect();
                (!subset.is_empty()).then(|| teacher.evaluate(&subset)).transpose()
            };
            let path = config.paths.role_teacher.clone();
            teacher.save(&path)?;
            TeacherReport {
                kind,
                hash: teacher.hash(),
                summary: teacher.summary.clone(),
                dev: eval(Split::Dev)?,
                test: eval(Split::Test)?,
                checkpoint: path,
            }
        }
    };
    let metrics_path = PathBuf::from(format!("{}.metrics.json", report.checkpoint.display()));
    write_file(&metrics_path, &to_json(&report)?)?;
    let _ = writeln!(out, "{kind} teacher saved to {}", report.checkpoint.display());
    if let Some(s) = &report.summary {
        let _ = writeln!(out, "best epoch {} ({} macro-F1 {:.4})", s.best_epoch, s.selected_on, s.best_macro_f1);
    }
    for (name, m) in [("dev", &report.dev), ("test", &report.test)] {
        if let Some(m) = m {
            let _ = writeln!(out, "{name}: macro-F1 {:.4}, accuracy {:.4} over {} examples", m.macro_f1, m.accuracy, m.examples);
        }
    }
    Ok(report.checkpoint)
}

fn load_teachers(config: &RunConfig) -> Result<(RelationTeacher, RoleTeacher)> {
    Ok((
        RelationTeacher::load(&config.paths.relation_teacher)?,
        RoleTeacher::load(&config.paths.role_teacher)?,
    ))
}

/// Computes (or reuses) teacher outputs for every article in the corpus.
pub fn cache_teacher(config: &RunConfig, out_dir: Option<&Path>, out: &mut dyn Write) -> Result<PathBuf> {
    let (rel, role) = load_teachers(config)?;
    let articles = load_articles(config)?;
    let dir = out_dir.unwrap_or(&config.paths.cache).to_path_buf();
    let manifest = cache_teacher_outputs(&articles, &rel, &role, &dir)?;
    let _ = writeln!(
        out,
        "{} records in {} ({} computed, {} reused)",
        manifest.records.len(),
        dir.display(),
        manifest.computed,
        manifest.reused
    );
    Ok(dir)
}

/// Opens the cache when `needed`; otherwise training never touches it.
fn cache_for(config: &RunConfig, needed: bool) -> Result<Option<TeacherCache>> {
    if !needed {
        return Ok(None);
    }
    let cache = TeacherCache::open(&config.paths.cache)?;
    if let Ok((rel, role)) = load_teachers(config) {
        let current = discoprop::teachers::combined_hash(&rel.hash(), &role.hash());
        if current != cache.teacher_hash() {
            log::warn!(
                "teacher cache {} was written by different teacher checkpoints; re-run cache-teacher",
                config.paths.cache.display()
            );
        }
    }
    Ok(Some(cache))
}

fn tagged(kind: &str, value: &impl Serialize, extra: &[(&str, Value)]) -> Result<String> {
    let mut v = serde_json::to_value(value).map_err(|e| CliError::Input(format!("serialising metrics: {e}")))?;
    if let Value::Object(map) = &mut v {
        map.insert("kind".into(), Value::String(kind.into()));
        for (k, x) in extra {
            map.insert((*k).into(), x.clone());
        }
    }
    Ok(v.to_string())
}

/// Trains a student into `{output}/{run_id}/`: `config.snapshot`,
/// `model.ckpt` and `metrics.jsonl`.
pub fn train_student_run(config: &RunConfig, out: &mut dyn Write) -> Result<PathBuf> {
    let run_dir = config.run_dir();
    let snapshot = config.snapshot()?;
    write_file(&run_dir.join("config.snapshot"), &snapshot)?;

    let articles = load_articles(config)?;
    let train = in_split(&articles, Split::Train);
    let dev = in_split(&articles, Split::Dev);
    let test = in_split(&articles, Split::Test);
    if train.is_empty() {
        return Err(CliError::Input("the split manifest lists no train articles".into()));
    }
    let tc = config.train_config();
    let (local, global) = tc.teacher_needs();
    let cache = cache_for(config, local || global)?;
    log::info!("training {} student on {} articles ({} dev)", tc.mode, train.len(), dev.len());
    let outcome = train_student(&train, &dev, cache.as_ref(), &tc)?;
    outcome.model.save(&run_dir.join("model.ckpt"))?;

    let mut lines = Vec::new();
    for log in &outcome.history {
        lines.push(tagged("epoch", log, &[])?);
    }
    lines.push(json!({"kind": "selected", "best_epoch": outcome.best_epoch}).to_string());
    let _ = writeln!(out, "selected epoch {}", outcome.best_epoch);
    for (name, split) in [("dev", &dev), ("test", &test)] {
        if split.is_empty() {
            continue;
        }
        let m = evaluate(&outcome.model, split, cache.as_ref())?;
        lines.push(tagged("eval", &m, &[("split", Value::String(name.into()))])?);
        let _ = writeln!(out, "{name}: {m}");
    }
    write_file(&run_dir.join("metrics.jsonl"), &(lines.join("\n") + "\n"))?;
    let _ = writeln!(out, "run directory: {}", run_dir.display());
    Ok(run_dir)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Tsv,
    Json,
}

fn checkpoint_or_default(config: &RunConfig, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint.map_or_else(|| config.run_dir().join("model.ckpt"), Path::to_path_buf)
}

fn load_model(path: &Path) -> Result<StudentModel> {
    if !path.is_file() {
        return Err(CliError::Input(format!("no student checkpoint at {}", path.display())));
    }
    Ok(StudentModel::load(path)?)
}

pub fn metrics_tsv(m: &MetricsReport) -> String {
    format!("{}\n{}\n", MetricsReport::tsv_header(), m.tsv_row())
}

/// Scores a checkpoint on one split; with `out_dir`, writes `metrics.tsv`
/// and `metrics.json` there as well.
pub fn evaluate_split(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    split: Split,
    format: Format,
    out_dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<MetricsReport> {
    let model = load_model(&checkpoint_or_default(config, checkpoint))?;
    let articles = in_split(&load_articles(config)?, split);
    if articles.is_empty() {
        return Err(CliError::Input(format!("split {split} has no articles")));
    }
    let cache = cache_for(config, model.mode == Mode::Concat)?;
    let m = evaluate(&model, &articles, cache.as_ref())?;
    let (tsv, json) = (metrics_tsv(&m), to_json(&m)?);
    if let Some(dir) = out_dir {
        write_file(&dir.join("metrics.tsv"), &tsv)?;
        write_file(&dir.join("metrics.json"), &json)?;
    }
    let _ = match format {
        Format::Tsv => write!(out, "{tsv}"),
        Format::Json => writeln!(out, "{json}"),
    };
    Ok(m)
}

/// Cross-tabulates gold sentence labels with the cached teachers' argmax
/// relation and role; writes `relation_ratios.tsv` and `role_ratios.tsv`.
pub fn analyze(config: &RunConfig, split: Option<Split>, out_dir: Option<&Path>, out: &mut dyn Write) -> Result<(RatioTable, RatioTable)> {
    let cache = TeacherCache::open(&config.paths.cache)?;
    let articles: Vec<Article> = load_articles(config)?
        .into_iter()
        .filter(|a| split.is_none_or(|s| a.split == s))
        .collect();
    if articles.is_empty() {
        return Err(CliError::Input("no articles to analyse".into()));
    }
    let mut gold: Vec<Label> = Vec::new();
    let (mut relations, mut roles) = (Vec::new(), Vec::new());
    for a in &articles {
        let outputs = cache.outputs(&a.article_id)?;
        let covered = outputs.num_sentences();
        for (i, s) in a.sentences.iter().enumerate() {
            gold.push(s.gold_label.ok_or_else(|| {
                CliError::Input(format!("article {} sentence {i} has no gold label", a.article_id))
            })?);
            let inside = i < covered;
            relations.push(inside.then(|| outputs.relation_argmax(i)).flatten().map(|r| r.index()));
            roles.push(inside.then(|| outputs.role_argmax(i)).flatten().map(|r| r.index()));
        }
    }
    let relation = ratio_analysis(&gold, &relations, RatioAxis::Relation)?;
    let role = ratio_analysis(&gold, &roles, RatioAxis::Role)?;
    let dir = out_dir.map_or_else(|| config.paths.output.join("analysis"), Path::to_path_buf);
    write_file(&dir.join("relation_ratios.tsv"), &relation.to_tsv())?;
    write_file(&dir.join("role_ratios.tsv"), &role.to_tsv())?;
    let _ = writeln!(out, "Discourse relations ({} sentences)\n{}", gold.len(), relation.render());
    let _ = writeln!(out, "Discourse roles ({} sentences)\n{}", gold.len(), role.render());
    Ok((relation, role))
}

/// Labels one article file. Explanations come from cached teacher outputs
/// when present; concat models compute them from the teacher checkpoints
/// when the article is not cached.
pub fn predict_article(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    article_path: &Path,
    id: Option<&str>,
    json_output: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let text = fs::read_to_string(article_path).map_err(|e| io_err("reading article", article_path, e))?;
    let id = id.map(str::to_owned).unwrap_or_else(|| {
        article_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "article".into())
    });
    let article = Article::from_text(id, text, Split::Test);
    article.validate()?;
    let model = load_model(&checkpoint_or_default(config, checkpoint))?;

    let cached = TeacherCache::open(&config.paths.cache)
        .ok()
        .filter(|c| c.contains(&article.article_id))
        .map(|c| c.outputs(&article.article_id))
        .transpose()?;
    let outputs = match (cached, model.mode) {
        (Some(o), _) => Some(o),
        (None, Mode::Concat) => {
            let (rel, role) = load_teachers(config)?;
            Some(infer_teacher_outputs(&article, &rel, &role)?)
        }
        (None, _) => None,
    };
    let prediction = predict_with(&article, &model, outputs.as_ref())?;
    if json_output {
        let _ = writeln!(out, "{}", to_json(&prediction)?);
        return Ok(());
    }
    let mut table = String::from("sentence\tlabel\tprobability\trelation\trole\ttext\n");
    for s in &prediction.sentences {
        let text = article.slice(article.sentences[s.index].char_span).replace(['\t', '\n'], " ");
        let prob = s.probs.map_or("-".to_string(), |p| format!("{:.4}", p[1]));
        let (rel, role) = match &s.explanation {
            Some(e) => (e.relation.map_or("-".to_string(), |r| r.to_string()), e.role.to_string()),
            None => ("-".to_string(), "-".to_string()),
        };
        let label = if s.label.is_propaganda() { "propaganda" } else { "benign" };
        let _ = writeln!(table, "{}\t{label}\t{prob}\t{rel}\t{role}\t{text}", s.index);
    }
    let _ = write!(out, "{table}");
    Ok(())
}
