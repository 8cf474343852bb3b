//! Synthetic, linearly separable fixtures shared by the integration tests.
#![allow(dead_code)]

use discoprop::corpus::{Article, CharSpan, Explicitness, Relation, RelationPair, Role, RoleDocument, Split};
use discoprop::encoder::EncoderConfig;
use discoprop::student::StudentModel;
use discoprop::teachers::TeacherConfig;
use ndarray::Array1;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// One cue word per role, in role order.
pub const ROLE_CUES: [&str; 8] = [
    "announced",
    "resulting",
    "previously",
    "currently",
    "decades",
    "recalled",
    "arguably",
    "expected",
];

/// Words that only occur in propaganda sentences.
pub const LOADED: [&str; 6] = ["disgraceful", "traitorous", "catastrophic", "shameless", "corrupt", "outrageous"];

pub const FILLER: [&str; 16] = [
    "city", "council", "budget", "report", "members", "plan", "water", "school", "road", "office", "week", "people",
    "market", "energy", "local", "new",
];

/// Sentence-initial connective per relation, in relation order.
pub const CONNECTIVES: [&str; 4] = ["However", "Because", "Then", "Also"];

pub fn toy_encoder(d: usize) -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        heads: 2,
        vocab_size: 512,
        ..EncoderConfig::toy(d)
    }
}

pub fn teacher_config(d: usize, epochs: usize) -> TeacherConfig {
    TeacherConfig {
        encoder: toy_encoder(d),
        epochs,
        learning_rate: 1e-2,
        batch_size: 2,
        ..TeacherConfig::default()
    }
}

fn capitalise(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn fillers(rng: &mut ChaCha8Rng, k: usize) -> Vec<&'static str> {
    (0..k).map(|_| *FILLER.choose(rng).unwrap()).collect()
}

/// Articles whose propaganda sentences are exactly the Evaluation-role
/// sentences; each of them carries one loaded word, which is the only
/// propaganda token.
pub fn propaganda_articles(seed: u64, count: usize, split: Split, prefix: &str) -> Vec<Article> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|a| {
            let n = rng.random_range(6..=10);
            let mut sentences = Vec::with_capacity(n);
            let mut any_propaganda = false;
            for i in 0..n {
                let evaluation = rng.random_bool(0.3) || (i == n - 1 && !any_propaganda);
                any_propaganda |= evaluation;
                let role = if evaluation {
                    Role::D3.index()
                } else {
                    *[0usize, 1, 2, 3, 4, 5, 7].choose(&mut rng).unwrap()
                };
                let mut words = vec![capitalise(ROLE_CUES[role])];
                words.extend(fillers(&mut rng, 3).iter().map(|w| w.to_string()));
                if evaluation {
                    words.push(LOADED.choose(&mut rng).unwrap().to_string());
                }
                words.extend(fillers(&mut rng, 1).iter().map(|w| w.to_string()));
                sentences.push(format!("{}.", words.join(" ")));
            }
            let mut article = Article::from_text(format!("{prefix}{a}"), sentences.join(" "), split);
            assert_eq!(article.sentences.len(), n, "fixture sentence split");
            let spans: Vec<CharSpan> = article
                .sentences
                .iter()
                .flat_map(|s| s.tokens.iter())
                .filter(|t| LOADED.contains(&article.slice(t.char_span)))
                .map(|t| t.char_span)
                .collect();
            article.label_from_spans(&spans);
            article
        })
        .collect()
}

/// `per_class` pairs per relation; the relation is signalled by the first
/// word of the second argument.
pub fn relation_pairs(seed: u64, per_class: usize, split: Split) -> Vec<RelationPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..per_class {
        for rel in Relation::ALL {
            let arg1 = format!("{} {}.", capitalise(fillers(&mut rng, 1)[0]), fillers(&mut rng, 3).join(" "));
            let arg2 = format!("{} {}.", CONNECTIVES[rel.index()], fillers(&mut rng, 3).join(" "));
            out.push(RelationPair {
                arg1_text: arg1,
                arg2_text: arg2,
                relation: rel,
                explicitness: Explicitness::Explicit,
                split,
            });
        }
    }
    out
}

/// Documents with one sentence per role (shuffled); the role is signalled
/// by the sentence's first word.
pub fn role_documents(seed: u64, count: usize, split: Split) -> Vec<RoleDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|d| {
            let mut roles: Vec<Role> = Role::ALL.to_vec();
            roles.shuffle(&mut rng);
            RoleDocument {
                doc_id: format!("doc{d}"),
                sentences: roles
                    .into_iter()
                    .map(|r| {
                        (
                            format!("{} {}.", capitalise(ROLE_CUES[r.index()]), fillers(&mut rng, 4).join(" ")),
                            r,
                        )
                    })
                    .collect(),
                split,
            }
        })
        .collect()
}

pub fn softmax_row(z: Array1<f64>) -> Array1<f64> {
    let m = z.fold(f64::MIN, |a, &b| a.max(b));
    let e = z.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

/// Head output computed directly from the stored weights.
pub fn manual_head(model: &StudentModel, prefix: &str, x: Array1<f64>) -> Array1<f64> {
    let p = |n: &str| model.params.get(&format!("{prefix}.{n}")).unwrap().clone();
    let h = x.dot(&p("hidden.weight")) + p("hidden.bias").row(0);
    softmax_row(h.dot(&p("out.weight")) + p("out.bias").row(0))
}
