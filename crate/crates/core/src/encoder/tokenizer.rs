use crate::corpus::{align_tokens, Article, CharSpan, TokenAlignment};
use crate::error::Result;

/// Id of the sentence start marker; hashed pieces use `1..vocab_size`.
pub const MARKER_ID: usize = 0;

/// Splits words into fixed-width character pieces and hashes each piece
/// into a bounded vocabulary. Continuation pieces hash differently from
/// word-initial ones.
#[derive(Clone, Debug, PartialEq)]
pub struct PieceTokenizer {
    pub vocab_size: usize,
    pub piece_len: usize,
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl PieceTokenizer {
    pub fn piece_id(&self, piece: &str, continuation: bool) -> usize {
        let lower = piece.to_lowercase();
        let prefix: &[u8] = if continuation { b"##" } else { b"" };
        let h = fnv1a(prefix.iter().copied().chain(lower.bytes()));
        1 + (h % (self.vocab_size as u64 - 1)) as usize
    }

    /// Pieces of one word token as `(span, id)`.
    pub fn pieces(&self, chars: &[char], token: CharSpan) -> Vec<(CharSpan, usize)> {
        let mut out = Vec::new();
        let mut start = token.start;
        while start < token.end {
            let end = (start + self.piece_len).min(token.end);
            let text: String = chars[start..end].iter().collect();
            out.push((CharSpan::new(start, end), self.piece_id(&text, start != token.start)));
            start = end;
        }
        out
    }
}

/// Pieces of one surviving sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SentencePieces {
    /// Position of the sentence marker in the input sequence.
    pub marker: usize,
    /// Sequence positions of the sentence's pieces.
    pub positions: Vec<usize>,
    pub spans: Vec<CharSpan>,
    /// Word token → piece indices (into `positions`).
    pub alignment: TokenAlignment,
}

/// Model input for one article after tail truncation.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedInput {
    pub ids: Vec<usize>,
    pub sentences: Vec<SentencePieces>,
    pub truncated: bool,
    /// Sentence count of the article before truncation.
    pub total_sentences: usize,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn marker_positions(&self) -> Vec<usize> {
        self.sentences.iter().map(|s| s.marker).collect()
    }
}

/// Lays out `[marker, pieces…]` per sentence until `budget` positions are
/// used. Sentences whose marker does not fit are dropped; a sentence cut
/// mid-way keeps the pieces that fit.
pub fn build_input(article: &Article, tokenizer: &PieceTokenizer, budget: usize) -> Result<EncodedInput> {
    let chars: Vec<char> = article.text.chars().collect();
    let mut ids = Vec::new();
    let mut sentences = Vec::new();
    let mut truncated = false;
    'outer: for sentence in &article.sentences {
        if ids.len() >= budget {
            truncated = true;
            break;
        }
        let marker = ids.len();
        ids.push(MARKER_ID);
        let mut positions = Vec::new();
        let mut spans = Vec::new();
        for token in &sentence.tokens {
            for (span, id) in tokenizer.pieces(&chars, token.char_span) {
                if ids.len() >= budget {
                    truncated = true;
                    let alignment = align_tokens(sentence, &spans)?;
                    sentences.push(SentencePieces {
                        marker,
                        positions,
                        spans,
                        alignment,
                    });
                    break 'outer;
                }
                positions.push(ids.len());
                ids.push(id);
                spans.push(span);
            }
        }
        let alignment = align_tokens(sentence, &spans)?;
        sentences.push(SentencePieces {
            marker,
            positions,
            spans,
            alignment,
        });
    }
    Ok(EncodedInput {
        ids,
        sentences,
        truncated,
        total_sentences: article.sentences.len(),
    })
}
