use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Split;
use crate::error::{Error, Result};

/// Top-level PDTB senses, in the column order of the local teacher output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    Comparison,
    Contingency,
    Temporal,
    Expansion,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::Comparison,
        Relation::Contingency,
        Relation::Temporal,
        Relation::Expansion,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl FromStr for Relation {
    type Err = Error;

    /// Accepts full sense paths such as `Contingency.Cause.Reason`.
    fn from_str(s: &str) -> Result<Self> {
        let top = s.trim().split('.').next().unwrap_or("").to_ascii_lowercase();
        match top.as_str() {
            "comparison" => Ok(Relation::Comparison),
            "contingency" => Ok(Relation::Contingency),
            "temporal" => Ok(Relation::Temporal),
            "expansion" => Ok(Relation::Expansion),
            _ => Err(Error::Validation(format!("unknown discourse relation `{s}`"))),
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// News discourse roles, in the column order of the global teacher output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    M1,
    M2,
    C1,
    C2,
    D1,
    D2,
    D3,
    D4,
}

impl Role {
    pub const ALL: [Role; 8] = [
        Role::M1,
        Role::M2,
        Role::C1,
        Role::C2,
        Role::D1,
        Role::D2,
        Role::D3,
        Role::D4,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn description(self) -> &'static str {
        match self {
            Role::M1 => "Main Event",
            Role::M2 => "Consequence",
            Role::C1 => "Previous Context",
            Role::C2 => "Current Context",
            Role::D1 => "Historical Event",
            Role::D2 => "Anecdotal Event",
            Role::D3 => "Evaluation",
            Role::D4 => "Expectation",
        }
    }
}

impl FromStr for Role {
    type Err = Error;

    /// Accepts the short codes and the descriptive names in any case, with
    /// spaces, underscores or hyphens.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s
            .trim()
            .to_ascii_lowercase()
            .replace(['_', '-'], " ")
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        let role = match norm.as_str() {
            "m1" | "main event" | "main" => Role::M1,
            "m2" | "consequence" => Role::M2,
            "c1" | "previous context" | "previous event" => Role::C1,
            "c2" | "current context" => Role::C2,
            "d1" | "historical event" => Role::D1,
            "d2" | "anecdotal event" => Role::D2,
            "d3" | "evaluation" => Role::D3,
            "d4" | "expectation" => Role::D4,
            _ => return Err(Error::Validation(format!("unknown discourse role `{s}`"))),
        };
        Ok(role)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Explicitness {
    Explicit,
    Implicit,
}

impl FromStr for Explicitness {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "explicit" => Ok(Explicitness::Explicit),
            "implicit" => Ok(Explicitness::Implicit),
            _ => Err(Error::Validation(format!("unknown explicitness `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationPair {
    pub arg1_text: String,
    pub arg2_text: String,
    pub relation: Relation,
    pub explicitness: Explicitness,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleDocument {
    pub doc_id: String,
    pub sentences: Vec<(String, Role)>,
    pub split: Split,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Senses {
    One(String),
    Many(Vec<String>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationRecord {
    arg1: String,
    arg2: String,
    sense: Senses,
    explicitness: String,
    #[serde(default)]
    section: Option<u32>,
    #[serde(default)]
    split: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RoleSentence {
    text: String,
    role: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RoleRecord {
    doc_id: String,
    sentences: Vec<RoleSentence>,
    #[serde(default)]
    split: Option<String>,
}

/// PDTB section convention: 2–21 train, 22 and 24 dev, 23 test. Sections 0
/// and 1 are not used.
fn section_split(section: u32) -> Option<Split> {
    match section {
        2..=21 => Some(Split::Train),
        22 | 24 => Some(Split::Dev),
        23 => Some(Split::Test),
        _ => None,
    }
}

fn record_split(split: Option<&str>) -> Result<Split> {
    split.map_or(Ok(Split::Train), str::parse)
}

fn jsonl_records<'a, T: serde::de::DeserializeOwned>(
    text: &'a str,
    origin: &'a Path,
) -> impl Iterator<Item = Result<(usize, T)>> + 'a {
    text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(move |(i, l)| {
        serde_json::from_str::<T>(l)
            .map(|r| (i + 1, r))
            .map_err(|e| Error::Parse {
                path: origin.to_owned(),
                line: i + 1,
                message: e.to_string(),
            })
    })
}

fn with_line(origin: &Path, line: usize) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Parse {
        path: origin.to_owned(),
        line,
        message: e.to_string(),
    }
}

/// Parses relation JSONL text. A record with several senses becomes one
/// pair per top-level sense.
pub fn parse_relation_records(text: &str, origin: &Path) -> Result<Vec<RelationPair>> {
    let mut out = Vec::new();
    for rec in jsonl_records::<RelationRecord>(text, origin) {
        let (line, rec) = rec?;
        let err = with_line(origin, line);
        let split = match (rec.split.as_deref(), rec.section) {
            (Some(s), _) => s.parse().map_err(&err)?,
            (None, Some(section)) => match section_split(section) {
                Some(s) => s,
                None => continue,
            },
            (None, None) => Split::Train,
        };
        let explicitness: Explicitness = rec.explicitness.parse().map_err(&err)?;
        let senses = match rec.sense {
            Senses::One(s) => vec![s],
            Senses::Many(v) => v,
        };
        if senses.is_empty() {
            return Err(err(Error::Validation("record has no sense".into())));
        }
        for sense in senses {
            out.push(RelationPair {
                arg1_text: rec.arg1.clone(),
                arg2_text: rec.arg2.clone(),
                relation: sense.parse().map_err(&err)?,
                explicitness,
                split,
            });
        }
    }
    Ok(out)
}

pub fn load_relation_corpus(path: &Path) -> Result<Vec<RelationPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_relation_records(&text, path)
}

pub fn parse_role_records(text: &str, origin: &Path) -> Result<Vec<RoleDocument>> {
    let mut out = Vec::new();
    for rec in jsonl_records::<RoleRecord>(text, origin) {
        let (line, rec) = rec?;
        let err = with_line(origin, line);
        if rec.sentences.is_empty() {
            return Err(err(Error::Validation(format!("document {} has no sentences", rec.doc_id))));
        }
        let sentences = rec
            .sentences
            .into_iter()
            .map(|s| Ok((s.text, s.role.parse::<Role>()?)))
            .collect::<Result<Vec<_>>>()
            .map_err(&err)?;
        out.push(RoleDocument {
            doc_id: rec.doc_id,
            sentences,
            split: record_split(rec.split.as_deref()).map_err(&err)?,
        });
    }
    Ok(out)
}

pub fn load_role_corpus(path: &Path) -> Result<Vec<RoleDocument>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_role_records(&text, path)
}
