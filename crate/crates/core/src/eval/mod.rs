//! Propaganda-class precision, recall and F1 at sentence and token level,
//! plus the teacher-class ratio tables.
//!
//! Token-level units are words; a word predicted positive is one with any
//! positive sub-word piece.

mod ratio;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{Article, Label};
use crate::distill::Level;
use crate::error::{Error, Result};

pub use ratio::{ratio_analysis, RatioAxis, RatioTable};

/// Identifies one scored unit: a sentence, or a word within a sentence.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UnitKey {
    pub article_id: String,
    pub sentence: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<usize>,
}

impl UnitKey {
    pub fn sentence(article_id: &str, sentence: usize) -> Self {
        Self {
            article_id: article_id.to_owned(),
            sentence,
            token: None,
        }
    }

    pub fn token(article_id: &str, sentence: usize, token: usize) -> Self {
        Self {
            article_id: article_id.to_owned(),
            sentence,
            token: Some(token),
        }
    }
}

impl fmt::Display for UnitKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.token {
            Some(t) => write!(f, "{}:{}:{}", self.article_id, self.sentence, t),
            None => write!(f, "{}:{}", self.article_id, self.sentence),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn record(&mut self, predicted: bool, gold: bool) {
        match (predicted, gold) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 of a positive class; every `0/0` is 0.
pub fn prf(counts: &Counts) -> (f64, f64, f64) {
    let p = ratio(counts.tp, counts.tp + counts.fp);
    let r = ratio(counts.tp, counts.tp + counts.fn_);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level: Level,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

impl MetricsReport {
    pub fn from_counts(level: Level, counts: Counts) -> Self {
        let (precision, recall, f1) = prf(&counts);
        Self {
            level,
            precision,
            recall,
            f1,
            counts,
        }
    }

    pub fn tsv_header() -> &'static str {
        "level\tprecision\trecall\tf1\ttp\tfp\tfn\ttn"
    }

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}",
            self.level,
            self.precision,
            self.recall,
            self.f1,
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_,
            self.counts.tn
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-level  P {:.2}  R {:.2}  F1 {:.2}",
            self.level,
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f1
        )
    }
}

fn list_keys<'a>(keys: impl Iterator<Item = &'a UnitKey>) -> String {
    let keys: Vec<String> = keys.map(ToString::to_string).collect();
    let shown = keys.iter().take(10).cloned().collect::<Vec<_>>().join(", ");
    if keys.len() > 10 {
        format!("{shown}, … ({} total)", keys.len())
    } else {
        shown
    }
}

/// Scores predictions against gold labels over an identical set of units.
pub fn score(predictions: &BTreeMap<UnitKey, bool>, gold: &BTreeMap<UnitKey, bool>, level: Level) -> Result<MetricsReport> {
    let missing_gold: Vec<&UnitKey> = predictions.keys().filter(|k| !gold.contains_key(*k)).collect();
    if !missing_gold.is_empty() {
        return Err(Error::Validation(format!(
            "no gold label for predicted units: {}",
            list_keys(missing_gold.into_iter())
        )));
    }
    let missing_pred: Vec<&UnitKey> = gold.keys().filter(|k| !predictions.contains_key(*k)).collect();
    if !missing_pred.is_empty() {
        return Err(Error::Validation(format!(
            "no prediction for gold units: {}",
            list_keys(missing_pred.into_iter())
        )));
    }
    let mut counts = Counts::default();
    for (key, &g) in gold {
        counts.record(predictions[key], g);
    }
    Ok(MetricsReport::from_counts(level, counts))
}

/// Gold labels of every unit of `articles` at `level`.
pub fn gold_units(articles: &[Article], level: Level) -> Result<BTreeMap<UnitKey, bool>> {
    let mut out = BTreeMap::new();
    for a in articles {
        for s in &a.sentences {
            match level {
                Level::Sentence => {
                    let label = s.gold_label.ok_or_else(|| Error::Article {
                        article_id: a.article_id.clone(),
                        message: format!("sentence {} has no gold label", s.index),
                    })?;
                    out.insert(UnitKey::sentence(&a.article_id, s.index), label.is_propaganda());
                }
                Level::Token => {
                    for (t, tok) in s.tokens.iter().enumerate() {
                        let label = tok.gold_label.ok_or_else(|| Error::Article {
                            article_id: a.article_id.clone(),
                            message: format!("token {t} of sentence {} has no gold label", s.index),
                        })?;
                        out.insert(UnitKey::token(&a.article_id, s.index, t), label.is_propaganda());
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Predicts propaganda for every unit.
pub fn baseline_all_propaganda(articles: &[Article], level: Level) -> Result<MetricsReport> {
    let gold = gold_units(articles, level)?;
    let predictions = gold.keys().map(|k| (k.clone(), true)).collect();
    score(&predictions, &gold, level)
}

/// Macro-averaged F1 over the classes that occur in `gold` or `predicted`.
pub fn macro_f1(gold: &[usize], predicted: &[usize], num_classes: usize) -> f64 {
    assert_eq!(gold.len(), predicted.len());
    let mut per_class = vec![Counts::default(); num_classes];
    for (&g, &p) in gold.iter().zip(predicted) {
        for (c, counts) in per_class.iter_mut().enumerate() {
            counts.record(p == c, g == c);
        }
    }
    let present: Vec<f64> = per_class
        .iter()
        .filter(|c| c.tp + c.fp + c.fn_ > 0)
        .map(|c| prf(c).2)
        .collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

pub fn accuracy(gold: &[usize], predicted: &[usize]) -> f64 {
    let hits = gold.iter().zip(predicted).filter(|(g, p)| g == p).count();
    ratio(hits as u64, gold.len() as u64)
}

/// Share of propaganda units among labeled units.
pub fn propaganda_ratio(gold: &BTreeMap<UnitKey, bool>) -> f64 {
    ratio(gold.values().filter(|&&g| g).count() as u64, gold.len() as u64)
}

pub fn label_of(positive: bool) -> Label {
    Label::from_bool(positive)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn units(labels: &[bool]) -> BTreeMap<UnitKey, bool> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| (UnitKey::sentence("a", i), l))
            .collect()
    }

    #[test]
    fn perfect_predictions() {
        let gold = units(&[true, false, true]);
        let r = score(&gold, &gold, Level::Sentence).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn zero_positive_predictions_score_zero() {
        let gold = units(&[true, false]);
        let pred = units(&[false, false]);
        let r = score(&pred, &gold, Level::Sentence).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert_eq!(r.counts.fn_, 1);
    }

    #[test]
    fn all_propaganda_closed_form() {
        let gold = units(&[true, false, true, false]);
        let pred = units(&[true; 4]);
        let r = score(&pred, &gold, Level::Sentence).unwrap();
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 1.0);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mismatched_units_are_listed() {
        let gold = units(&[true]);
        let mut pred = units(&[true]);
        pred.insert(UnitKey::token("zz", 3, 4), true);
        let err = score(&pred, &gold, Level::Token).unwrap_err().to_string();
        assert!(err.contains("zz:3:4"), "{err}");
        let err = score(&units(&[]), &gold, Level::Sentence).unwrap_err().to_string();
        assert!(err.contains("a:0"), "{err}");
    }

    #[test]
    fn macro_f1_averages_present_classes() {
        let gold = [0, 0, 1, 1];
        let pred = [0, 1, 1, 1];
        // class 0: P 1, R .5, F 2/3 ; class 1: P 2/3, R 1, F .8
        let expected = (2.0 / 3.0 + 0.8) / 2.0;
        assert!((macro_f1(&gold, &pred, 4) - expected).abs() < 1e-12);
        assert_eq!(accuracy(&gold, &pred), 0.75);
    }
}
