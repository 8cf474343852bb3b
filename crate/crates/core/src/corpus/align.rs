use super::{CharSpan, Label, Sentence};
use crate::error::{Error, Result};

/// For every word token of a sentence, the indices of its sub-word pieces.
pub type TokenAlignment = Vec<Vec<usize>>;

/// Maps each sub-word span to the single word token containing it.
///
/// Sub-word spans must be ordered and lie inside the sentence. A piece that
/// is not contained in exactly one token is an alignment error.
pub fn align_tokens(sentence: &Sentence, subword_spans: &[CharSpan]) -> Result<TokenAlignment> {
    let mut alignment = vec![Vec::new(); sentence.tokens.len()];
    let mut tok = 0;
    let mut prev_start = None;
    for (k, sw) in subword_spans.iter().enumerate() {
        if !sentence.char_span.contains(sw) {
            return Err(Error::Alignment(format!(
                "sub-word {k} {sw:?} lies outside sentence {} {:?}",
                sentence.index, sentence.char_span
            )));
        }
        if prev_start.is_some_and(|p| sw.start < p) {
            return Err(Error::Alignment(format!("sub-word {k} {sw:?} is out of order")));
        }
        prev_start = Some(sw.start);
        while tok < sentence.tokens.len() && sentence.tokens[tok].char_span.end <= sw.start {
            tok += 1;
        }
        match sentence.tokens.get(tok) {
            Some(t) if t.char_span.contains(sw) && !sw.is_empty() => alignment[tok].push(k),
            _ => {
                return Err(Error::Alignment(format!(
                    "sub-word {k} {sw:?} is not inside any token of sentence {}",
                    sentence.index
                )))
            }
        }
    }
    Ok(alignment)
}

/// Copies each token's label to all of its sub-words.
pub fn propagate_to_subwords(alignment: &TokenAlignment, token_labels: &[Option<Label>]) -> Vec<Option<Label>> {
    let n = alignment.iter().map(Vec::len).sum();
    let mut out = vec![None; n];
    for (tok, pieces) in alignment.iter().enumerate() {
        for &k in pieces {
            out[k] = token_labels[tok];
        }
    }
    out
}

/// A token is positive when any of its sub-words is. Tokens without
/// sub-words (e.g. truncated away) are negative.
pub fn aggregate_any_positive(alignment: &TokenAlignment, subword_positive: &[bool]) -> Vec<bool> {
    alignment
        .iter()
        .map(|pieces| pieces.iter().any(|&k| subword_positive.get(k).copied().unwrap_or(false)))
        .collect()
}
