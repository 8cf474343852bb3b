//! Articles, sentences and tokens with character-offset labels, plus the
//! loaders for the three corpora the pipeline consumes.
//!
//! All offsets count Unicode scalar values (not bytes), matching the span
//! annotations of the propaganda corpus. Tokens are words and punctuation
//! marks; sub-word pieces belong to the encoder and are related back to
//! words through [`align_tokens`].

mod align;
mod discourse;
mod propaganda;
mod segment;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use align::{aggregate_any_positive, align_tokens, propagate_to_subwords, TokenAlignment};
pub use discourse::{
    load_relation_corpus, load_role_corpus, parse_relation_records, parse_role_records, Explicitness,
    Relation, RelationPair, Role, RoleDocument,
};
pub use propaganda::{
    apply_sentence_labels, load_propaganda_corpus, load_split_manifest, merge_spans,
    propaganda_spans_from_tokens, read_article_text, SpanTable,
};
pub use segment::{sentence_split, word_tokens};

/// Half-open `[start, end)` range of character offsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn overlaps(&self, other: &CharSpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(&self, other: &CharSpan) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Propaganda,
    Benign,
}

impl Label {
    pub fn from_bool(propaganda: bool) -> Self {
        if propaganda {
            Label::Propaganda
        } else {
            Label::Benign
        }
    }

    pub fn is_propaganda(self) -> bool {
        self == Label::Propaganda
    }

    /// Class index used by the two-way heads: benign = 0, propaganda = 1.
    pub fn class_index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Propaganda => 1,
        }
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "propaganda" | "propaganda_sentence" => Ok(Label::Propaganda),
            "benign" | "non-propaganda" | "non_propaganda" => Ok(Label::Benign),
            other => Err(Error::Validation(format!("unknown propaganda label `{other}`"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Propaganda => "propaganda",
            Label::Benign => "benign",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" | "validation" | "valid" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub char_span: CharSpan,
    pub gold_label: Option<Label>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub index: usize,
    pub char_span: CharSpan,
    pub tokens: Vec<Token>,
    pub gold_label: Option<Label>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub article_id: String,
    pub text: String,
    pub sentences: Vec<Sentence>,
    pub split: Split,
}

impl Article {
    /// Segments `text` into sentences and word tokens. Labels are absent;
    /// see [`Article::label_from_spans`].
    pub fn from_text(article_id: impl Into<String>, text: impl Into<String>, split: Split) -> Self {
        let text = text.into();
        let sentences = sentence_split(&text)
            .into_iter()
            .enumerate()
            .map(|(index, span)| Sentence {
                index,
                char_span: span,
                tokens: word_tokens(&text, span)
                    .into_iter()
                    .map(|t| Token {
                        char_span: t,
                        gold_label: None,
                    })
                    .collect(),
                gold_label: None,
            })
            .collect();
        Article {
            article_id: article_id.into(),
            text,
            sentences,
            split,
        }
    }

    /// Builds an article whose sentences are exactly `segments`, joined by
    /// newlines. Line breaks inside a segment become spaces.
    pub fn from_segments<S: AsRef<str>>(article_id: impl Into<String>, segments: &[S], split: Split) -> Result<Self, Error> {
        let article_id = article_id.into();
        let mut text = String::new();
        let mut spans = Vec::with_capacity(segments.len());
        let mut offset = 0;
        for (i, seg) in segments.iter().enumerate() {
            if i > 0 {
                text.push('\n');
                offset += 1;
            }
            let seg: String = seg.as_ref().chars().map(|c| if c == '\n' || c == '\r' { ' ' } else { c }).collect();
            let lead = seg.chars().take_while(|c| c.is_whitespace()).count();
            let len = seg.chars().count();
            let trimmed = seg.trim().chars().count();
            if trimmed == 0 {
                return Err(Error::Article {
                    article_id,
                    message: format!("segment {i} is empty"),
                });
            }
            spans.push(CharSpan::new(offset + lead, offset + lead + trimmed));
            text.push_str(&seg);
            offset += len;
        }
        let sentences = spans
            .into_iter()
            .enumerate()
            .map(|(index, span)| Sentence {
                index,
                char_span: span,
                tokens: word_tokens(&text, span)
                    .into_iter()
                    .map(|t| Token {
                        char_span: t,
                        gold_label: None,
                    })
                    .collect(),
                gold_label: None,
            })
            .collect();
        let article = Article {
            article_id,
            text,
            sentences,
            split,
        };
        article.validate()?;
        Ok(article)
    }

    /// Number of characters (not bytes) in the text.
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// Projects gold propaganda spans onto tokens (overlap rule) and
    /// sentences (any token). Overlapping spans are merged first.
    pub fn label_from_spans(&mut self, spans: &[CharSpan]) {
        let merged = merge_spans(spans);
        for sentence in &mut self.sentences {
            let mut any = false;
            for token in &mut sentence.tokens {
                let hit = merged.iter().any(|s| s.overlaps(&token.char_span));
                any |= hit;
                token.gold_label = Some(Label::from_bool(hit));
            }
            sentence.gold_label = Some(Label::from_bool(any));
        }
    }

    /// Text covered by `span`.
    pub fn slice(&self, span: CharSpan) -> &str {
        let mut indices = self.text.char_indices().map(|(b, _)| b).chain(std::iter::once(self.text.len()));
        let start = indices.nth(span.start).unwrap_or(self.text.len());
        let end = if span.end == span.start {
            start
        } else {
            indices.nth(span.end - span.start - 1).unwrap_or(self.text.len())
        };
        &self.text[start..end]
    }

    /// Checks the ordering and containment invariants of sentences and tokens.
    pub fn validate(&self) -> Result<(), Error> {
        let len = self.char_len();
        let fail = |message: String| Error::Article {
            article_id: self.article_id.clone(),
            message,
        };
        let mut prev_end = 0;
        for (i, s) in self.sentences.iter().enumerate() {
            if s.index != i {
                return Err(fail(format!("sentence {i} carries index {}", s.index)));
            }
            if s.char_span.start < prev_end || s.char_span.end > len || s.char_span.is_empty() {
                return Err(fail(format!("sentence {i} span {:?} is out of order or bounds", s.char_span)));
            }
            if s.tokens.is_empty() {
                return Err(fail(format!("sentence {i} has no tokens")));
            }
            let mut tok_end = s.char_span.start;
            for t in &s.tokens {
                if t.char_span.start < tok_end || !s.char_span.contains(&t.char_span) || t.char_span.is_empty() {
                    return Err(fail(format!("sentence {i} token {:?} is out of order or bounds", t.char_span)));
                }
                tok_end = t.char_span.end;
            }
            prev_end = s.char_span.end;
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }

    pub fn is_labeled(&self) -> bool {
        self.sentences.iter().all(|s| s.gold_label.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_projection_labels_containing_sentence() {
        let text = "Wages rose by four percent last year in the region. Nothing else.";
        let mut a = Article::from_text("a", text, Split::Train);
        a.label_from_spans(&[CharSpan::new(10, 25)]);
        assert_eq!(a.sentences[0].gold_label, Some(Label::Propaganda));
        assert_eq!(a.sentences[1].gold_label, Some(Label::Benign));
        a.validate().unwrap();
    }

    #[test]
    fn no_spans_means_all_benign() {
        let mut a = Article::from_text("a", "One. Two three.", Split::Dev);
        a.label_from_spans(&[]);
        assert!(a
            .sentences
            .iter()
            .flat_map(|s| s.tokens.iter().map(|t| t.gold_label))
            .all(|l| l == Some(Label::Benign)));
    }

    #[test]
    fn slice_uses_character_offsets() {
        let a = Article::from_text("a", "Ünïcödé words here.", Split::Train);
        assert_eq!(a.slice(CharSpan::new(0, 7)), "Ünïcödé");
        assert_eq!(a.slice(a.sentences[0].tokens.last().unwrap().char_span), ".");
    }

    #[test]
    fn label_parsing() {
        assert_eq!("Propaganda".parse::<Label>().unwrap(), Label::Propaganda);
        assert_eq!("non-propaganda".parse::<Label>().unwrap(), Label::Benign);
        assert!("maybe".parse::<Label>().is_err());
        assert_eq!("validation".parse::<Split>().unwrap(), Split::Dev);
    }
}
