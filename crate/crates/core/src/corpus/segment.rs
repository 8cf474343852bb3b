//! Rule-based sentence and word segmentation over character offsets.

use super::CharSpan;

const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "vs", "etc", "inc", "ltd", "co", "corp", "gen", "gov",
    "sen", "rep", "rev", "lt", "col", "capt", "sgt", "no", "jan", "feb", "mar", "apr", "jun", "jul", "aug",
    "sep", "sept", "oct", "nov", "dec", "fig", "approx",
];

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '…')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | '”' | '’' | ')' | ']' | '»')
}

/// Whether the period at `dot` ends an abbreviation such as "Mr." or "U.S.".
fn ends_abbreviation(chars: &[char], dot: usize) -> bool {
    let mut start = dot;
    while start > 0 && (chars[start - 1].is_alphanumeric() || chars[start - 1] == '.') {
        start -= 1;
    }
    let word: String = chars[start..dot].iter().collect();
    if word.contains('.') {
        return true;
    }
    ABBREVIATIONS.contains(&word.to_lowercase().as_str())
}

/// Splits `text` into sentence spans.
///
/// A newline always ends a sentence. Otherwise a run of terminal
/// punctuation (plus trailing quotes or brackets) ends a sentence when it is
/// followed by whitespace and the next sentence does not start lowercase;
/// a period closing a known abbreviation does not. Spans exclude surrounding
/// whitespace, so only whitespace lies between consecutive spans. A text
/// without terminal punctuation is a single sentence.
pub fn sentence_split(text: &str) -> Vec<CharSpan> {
    let chars: Vec<char> = text.chars().collect();
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut last_non_ws = 0;
    let close = |start: &mut Option<usize>, end: usize, spans: &mut Vec<CharSpan>| {
        if let Some(s) = start.take() {
            spans.push(CharSpan::new(s, end));
        }
    };

    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            close(&mut start, last_non_ws, &mut spans);
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if start.is_none() {
            start = Some(i);
        }
        if is_terminal(c) {
            let mut j = i;
            while j < chars.len() && is_terminal(chars[j]) {
                j += 1;
            }
            let single_period = j - i == 1 && c == '.';
            while j < chars.len() && is_closer(chars[j]) {
                j += 1;
            }
            let followed_by_space = j == chars.len() || chars[j].is_whitespace();
            let next_start = chars[j..].iter().find(|c| !c.is_whitespace());
            let next_lower = next_start.is_some_and(|c| c.is_lowercase());
            let abbrev = single_period && ends_abbreviation(&chars, i);
            last_non_ws = j;
            if followed_by_space && !next_lower && !abbrev {
                close(&mut start, j, &mut spans);
            }
            i = j;
            continue;
        }
        last_non_ws = i + 1;
        i += 1;
    }
    close(&mut start, last_non_ws, &mut spans);
    spans
}

/// Words and punctuation marks inside `span`: maximal alphanumeric runs
/// (joined across an inner apostrophe or hyphen) and single other
/// non-whitespace characters.
pub fn word_tokens(text: &str, span: CharSpan) -> Vec<CharSpan> {
    let chars: Vec<char> = text.chars().skip(span.start).take(span.len()).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_alphanumeric() {
            let mut j = i + 1;
            loop {
                if j < chars.len() && chars[j].is_alphanumeric() {
                    j += 1;
                } else if j + 1 < chars.len()
                    && matches!(chars[j], '\'' | '’' | '-')
                    && chars[j + 1].is_alphanumeric()
                {
                    j += 2;
                } else {
                    break;
                }
            }
            out.push(CharSpan::new(span.start + i, span.start + j));
            i = j;
        } else {
            out.push(CharSpan::new(span.start + i, span.start + i + 1));
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(text: &str) -> Vec<String> {
        let chars: Vec<char> = text.chars().collect();
        sentence_split(text)
            .into_iter()
            .map(|s| chars[s.start..s.end].iter().collect())
            .collect()
    }

    #[test]
    fn two_short_sentences() {
        assert_eq!(sentence_split("A. B."), vec![CharSpan::new(0, 2), CharSpan::new(3, 5)]);
    }

    #[test]
    fn no_terminal_punctuation_is_one_span() {
        let t = "  a headline without an end  ";
        assert_eq!(sentence_split(t), vec![CharSpan::new(2, 27)]);
    }

    #[test]
    fn whitespace_only_has_no_sentences() {
        assert!(sentence_split(" \n\t ").is_empty());
    }

    #[test]
    fn seven_sentence_fixture_matches_hand_offsets() {
        // Offsets marked by hand; a newline, an abbreviation, a quotation,
        // a question and an exclamation exercise every rule.
        let text = "Officials met on Monday. Mr. Lee spoke first.\n\
                    Critics called it \"a disaster.\" Was it? Nobody knows!\n\
                    The U.S. delegation left early. It rained";
        let expected = [
            (0, 24),
            (25, 45),
            (46, 77),
            (78, 85),
            (86, 99),
            (100, 131),
            (132, 141),
        ];
        let got = sentence_split(text);
        assert_eq!(
            got,
            expected.iter().map(|&(s, e)| CharSpan::new(s, e)).collect::<Vec<_>>(),
            "{:?}",
            texts(text)
        );
        assert_eq!(texts(text)[2], "Critics called it \"a disaster.\"");
        assert_eq!(texts(text)[5], "The U.S. delegation left early.");
    }

    #[test]
    fn lowercase_continuation_does_not_split() {
        assert_eq!(texts("It cost 3 p.m. sharp. e.g. this"), vec!["It cost 3 p.m. sharp. e.g. this"]);
    }

    #[test]
    fn gaps_between_spans_are_whitespace() {
        let text = "First one.  Second one?\n\nThird!  ";
        let chars: Vec<char> = text.chars().collect();
        let spans = sentence_split(text);
        let mut prev = 0;
        for s in &spans {
            assert!(chars[prev..s.start].iter().all(|c| c.is_whitespace()));
            prev = s.end;
        }
        assert!(chars[prev..].iter().all(|c| c.is_whitespace()));
    }

    #[test]
    fn words_and_punctuation() {
        let text = "Don't re-run it, ok?";
        let toks: Vec<String> = word_tokens(text, CharSpan::new(0, 20))
            .into_iter()
            .map(|s| text[s.start..s.end].to_owned())
            .collect();
        assert_eq!(toks, ["Don't", "re-run", "it", ",", "ok", "?"]);
    }
}
