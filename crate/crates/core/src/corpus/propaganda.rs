use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::{Article, CharSpan, Label, Split};
use crate::error::{Error, Result};

/// Gold propaganda spans per article id.
pub type SpanTable = BTreeMap<String, Vec<CharSpan>>;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_owned(),
        line,
        message: message.into(),
    }
}

/// Reads `article_id \t {train|dev|test}` rows, preserving file order.
pub fn load_split_manifest(path: &Path) -> Result<Vec<(String, Split)>> {
    let text = read(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, row) in data_lines(&text) {
        let cols: Vec<&str> = row.split('\t').collect();
        if cols.len() != 2 {
            return Err(parse_err(path, line, format!("expected 2 tab-separated columns, found {}", cols.len())));
        }
        let id = cols[0].trim().to_owned();
        let split = cols[1].parse::<Split>().map_err(|e| parse_err(path, line, e.to_string()))?;
        if !seen.insert(id.clone()) {
            return Err(parse_err(path, line, format!("article {id} listed twice")));
        }
        out.push((id, split));
    }
    Ok(out)
}

fn read_span_table(path: &Path) -> Result<SpanTable> {
    let text = read(path)?;
    let mut table = SpanTable::new();
    for (line, row) in data_lines(&text) {
        let cols: Vec<&str> = row.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 tab-separated columns, found {}", cols.len())));
        }
        let num = |s: &str, what: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| parse_err(path, line, format!("{what} `{s}` is not a non-negative integer")))
        };
        let start = num(cols[1], "start")?;
        let end = num(cols[2], "end")?;
        table
            .entry(cols[0].trim().to_owned())
            .or_default()
            .push(CharSpan { start, end });
    }
    Ok(table)
}

/// Locates `<id>.txt`, falling back to the `article<id>.txt` naming of the
/// original corpus release.
fn article_path(dir: &Path, id: &str) -> Option<PathBuf> {
    [format!("{id}.txt"), format!("article{id}.txt")]
        .into_iter()
        .map(|name| dir.join(name))
        .find(|p| p.is_file())
}

pub fn read_article_text(dir: &Path, id: &str) -> Result<String> {
    let path = article_path(dir, id).ok_or_else(|| Error::Article {
        article_id: id.to_owned(),
        message: format!("no article file in {}", dir.display()),
    })?;
    read(&path)
}

/// Union of possibly overlapping spans, sorted and disjoint. Touching spans
/// are joined as well.
pub fn merge_spans(spans: &[CharSpan]) -> Vec<CharSpan> {
    let mut sorted: Vec<CharSpan> = spans.iter().copied().filter(|s| !s.is_empty()).collect();
    sorted.sort();
    let mut out: Vec<CharSpan> = Vec::with_capacity(sorted.len());
    for s in sorted {
        match out.last_mut() {
            Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
            _ => out.push(s),
        }
    }
    out
}

/// Loads the articles listed in the split manifest and projects the gold
/// spans onto their tokens and sentences.
pub fn load_propaganda_corpus(articles_dir: &Path, spans_file: &Path, split_manifest: &Path) -> Result<Vec<Article>> {
    let manifest = load_split_manifest(split_manifest)?;
    let spans = read_span_table(spans_file)?;
    let known: HashSet<&str> = manifest.iter().map(|(id, _)| id.as_str()).collect();
    if let Some(unknown) = spans.keys().find(|id| !known.contains(id.as_str())) {
        return Err(Error::Article {
            article_id: unknown.clone(),
            message: "spans reference an article absent from the split manifest".into(),
        });
    }

    let mut articles = Vec::with_capacity(manifest.len());
    for (id, split) in manifest {
        let text = read_article_text(articles_dir, &id)?;
        let mut article = Article::from_text(id.clone(), text, split);
        let len = article.char_len();
        let gold = spans.get(&id).map(Vec::as_slice).unwrap_or(&[]);
        if let Some(bad) = gold.iter().find(|s| s.start >= s.end || s.end > len) {
            return Err(Error::Article {
                article_id: id,
                message: format!("span [{}, {}) is outside 0 ≤ start < end ≤ {len}", bad.start, bad.end),
            });
        }
        article.label_from_spans(gold);
        article.validate()?;
        articles.push(article);
    }
    Ok(articles)
}

/// Overrides sentence labels from `article_id \t sentence_index \t label`
/// rows. Token labels are left as they are.
pub fn apply_sentence_labels(articles: &mut [Article], path: &Path) -> Result<()> {
    let text = read(path)?;
    let index: BTreeMap<String, usize> = articles
        .iter()
        .enumerate()
        .map(|(i, a)| (a.article_id.clone(), i))
        .collect();
    for (line, row) in data_lines(&text) {
        let cols: Vec<&str> = row.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 tab-separated columns, found {}", cols.len())));
        }
        let id = cols[0].trim();
        let sentence: usize = cols[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line, format!("sentence index `{}` is not an integer", cols[1])))?;
        let label: Label = cols[2].parse().map_err(|e: Error| parse_err(path, line, e.to_string()))?;
        let Some(&a) = index.get(id) else {
            return Err(Error::Article {
                article_id: id.to_owned(),
                message: format!("{}:{line}: sentence label for an unknown article", path.display()),
            });
        };
        let article = &mut articles[a];
        let n = article.sentences.len();
        let Some(s) = article.sentences.get_mut(sentence) else {
            return Err(Error::Article {
                article_id: id.to_owned(),
                message: format!("sentence index {sentence} out of range (article has {n})"),
            });
        };
        s.gold_label = Some(label);
    }
    Ok(())
}

/// Character spans of maximal runs of consecutive propaganda tokens within
/// each sentence.
pub fn propaganda_spans_from_tokens(article: &Article) -> Vec<CharSpan> {
    let mut out = Vec::new();
    for s in &article.sentences {
        let mut run: Option<CharSpan> = None;
        for t in &s.tokens {
            if t.gold_label == Some(Label::Propaganda) {
                run = Some(match run {
                    Some(r) => CharSpan::new(r.start, t.char_span.end),
                    None => t.char_span,
                });
            } else if let Some(r) = run.take() {
                out.push(r);
            }
        }
        out.extend(run);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs::write;

    fn fixture(dir: &Path, spans: &str) -> (PathBuf, PathBuf, PathBuf) {
        let articles = dir.join("articles");
        fs::create_dir_all(&articles).unwrap();
        write(articles.join("a1.txt"), "The plan works. Traitors will pay dearly!\nCalm news here.").unwrap();
        write(articles.join("article2.txt"), "Nothing to see. Really.").unwrap();
        let spans_path = dir.join("spans.tsv");
        write(&spans_path, spans).unwrap();
        let manifest = dir.join("split.tsv");
        write(&manifest, "a1\ttrain\n2\tdev\n").unwrap();
        (articles, spans_path, manifest)
    }

    #[test]
    fn loads_and_projects_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (a, s, m) = fixture(dir.path(), "a1\t16\t24\n");
        let corpus = load_propaganda_corpus(&a, &s, &m).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus[1].article_id, "2");
        assert_eq!(corpus[1].split, Split::Dev);
        let labels: Vec<_> = corpus[0].sentences.iter().map(|s| s.gold_label.unwrap()).collect();
        assert_eq!(labels, [Label::Benign, Label::Propaganda, Label::Benign]);
        assert!(corpus[1].sentences.iter().all(|s| s.gold_label == Some(Label::Benign)));
        // deterministic
        assert_eq!(corpus, load_propaganda_corpus(&a, &s, &m).unwrap());
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let (a, s, m) = fixture(dir.path(), "a1\t1\t5\n\na1\tx\t9\n");
        let err = load_propaganda_corpus(&a, &s, &m).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn out_of_bounds_span_names_article() {
        let dir = tempfile::tempdir().unwrap();
        let (a, s, m) = fixture(dir.path(), "2\t3\t999\n");
        match load_propaganda_corpus(&a, &s, &m).unwrap_err() {
            Error::Article { article_id, .. } => assert_eq!(article_id, "2"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn merge_is_union() {
        let merged = merge_spans(&[CharSpan::new(10, 20), CharSpan::new(5, 15), CharSpan::new(30, 31)]);
        assert_eq!(merged, vec![CharSpan::new(5, 20), CharSpan::new(30, 31)]);
    }

    #[test]
    fn sentence_label_override() {
        let dir = tempfile::tempdir().unwrap();
        let (a, s, m) = fixture(dir.path(), "");
        let mut corpus = load_propaganda_corpus(&a, &s, &m).unwrap();
        let labels = dir.path().join("labels.tsv");
        write(&labels, "2\t1\tpropaganda\n").unwrap();
        apply_sentence_labels(&mut corpus, &labels).unwrap();
        assert_eq!(corpus[1].sentences[1].gold_label, Some(Label::Propaganda));
        write(&labels, "2\t7\tpropaganda\n").unwrap();
        assert!(apply_sentence_labels(&mut corpus, &labels).is_err());
    }
}
