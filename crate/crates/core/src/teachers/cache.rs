//! On-disk teacher outputs.
//!
//! Layout under the cache directory:
//!
//! ```text
//! manifest.json
//! local/<article>.json    P^local and s^local, keyed by the relation teacher hash
//! global/<article>.json   P^global and s^global, keyed by the role teacher hash
//! ```
//!
//! The halves are separate files so a run that switches one teacher off
//! never opens that teacher's records.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{combined_hash, infer_teacher_outputs, RelationTeacher, RoleTeacher, TeacherOutputs, TeacherSignals};
use crate::corpus::Article;
use crate::error::{Error, Result};
use crate::fsutil::{self, rows};

const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Half {
    article_id: String,
    teacher_hash: String,
    #[serde(with = "rows")]
    probs: Array2<f64>,
    #[serde(with = "rows")]
    embeddings: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub article_id: String,
    pub file: String,
    pub num_sentences: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub relation_hash: String,
    pub role_hash: String,
    pub teacher_hash: String,
    pub records: Vec<CacheEntry>,
    /// Articles recomputed by the run that wrote this manifest.
    pub computed: usize,
    /// Articles whose existing records were reused.
    pub reused: usize,
}

/// File stem for an article id; ids that are not plain names are hex-encoded.
fn file_stem(article_id: &str) -> String {
    let plain = !article_id.is_empty()
        && !article_id.starts_with('.')
        && article_id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if plain {
        article_id.to_owned()
    } else {
        format!("x{}", hex::encode(article_id.as_bytes()))
    }
}

fn half_path(dir: &Path, side: &str, stem: &str) -> PathBuf {
    dir.join(side).join(format!("{stem}.json"))
}

fn read_half(path: &Path, article_id: &str, hash: &str, classes: usize) -> Option<Half> {
    let half: Half = fsutil::read_json(path).ok()?;
    let n = half.probs.nrows();
    let consistent = half.article_id == article_id
        && half.teacher_hash == hash
        && half.embeddings.nrows() == n
        && (n == 0 || half.probs.ncols() == classes)
        && half
            .probs
            .rows()
            .into_iter()
            .all(|r| (r.sum() - 1.0).abs() <= super::STOCHASTIC_TOLERANCE);
    consistent.then_some(half)
}

fn write_half(path: &Path, half: &Half) -> Result<()> {
    fsutil::write_json(path, half)
}

/// Writes one record per article, reusing records whose hashes match the
/// given teachers and that parse cleanly; everything else is recomputed.
pub fn cache_teacher_outputs(
    articles: &[Article],
    rel: &RelationTeacher,
    role: &RoleTeacher,
    cache_dir: &Path,
) -> Result<CacheManifest> {
    let mut seen = BTreeSet::new();
    for a in articles {
        if !seen.insert(file_stem(&a.article_id)) {
            return Err(Error::Validation(format!("duplicate article id {} in cache request", a.article_id)));
        }
    }
    let relation_hash = rel.hash();
    let role_hash = role.hash();
    for side in ["local", "global"] {
        let d = cache_dir.join(side);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }

    let results: Vec<Result<(CacheEntry, bool)>> = articles
        .par_iter()
        .map(|article| {
            let stem = file_stem(&article.article_id);
            let local_path = half_path(cache_dir, "local", &stem);
            let global_path = half_path(cache_dir, "global", &stem);
            let local = read_half(&local_path, &article.article_id, &relation_hash, 4);
            let global = read_half(&global_path, &article.article_id, &role_hash, 8);
            if let (Some(l), Some(g)) = (&local, &global) {
                if l.probs.nrows() == g.probs.nrows() {
                    let entry = CacheEntry {
                        article_id: article.article_id.clone(),
                        file: format!("{stem}.json"),
                        num_sentences: l.probs.nrows(),
                    };
                    return Ok((entry, true));
                }
            }
            log::debug!("computing teacher outputs for {}", article.article_id);
            let out = infer_teacher_outputs(article, rel, role)?;
            write_half(
                &local_path,
                &Half {
                    article_id: out.article_id.clone(),
                    teacher_hash: relation_hash.clone(),
                    probs: out.p_local.clone(),
                    embeddings: out.s_local.clone(),
                },
            )?;
            write_half(
                &global_path,
                &Half {
                    article_id: out.article_id.clone(),
                    teacher_hash: role_hash.clone(),
                    probs: out.p_global.clone(),
                    embeddings: out.s_global.clone(),
                },
            )?;
            let entry = CacheEntry {
                article_id: article.article_id.clone(),
                file: format!("{stem}.json"),
                num_sentences: out.num_sentences(),
            };
            Ok((entry, false))
        })
        .collect();

    let mut records = Vec::with_capacity(articles.len());
    let (mut computed, mut reused) = (0, 0);
    for r in results {
        let (entry, hit) = r?;
        if hit {
            reused += 1;
        } else {
            computed += 1;
        }
        records.push(entry);
    }
    let manifest = CacheManifest {
        teacher_hash: combined_hash(&relation_hash, &role_hash),
        relation_hash,
        role_hash,
        records,
        computed,
        reused,
    };
    fsutil::write_json(&cache_dir.join(MANIFEST), &manifest)?;
    log::info!(
        "teacher cache {}: {} records ({computed} computed, {reused} reused)",
        cache_dir.display(),
        manifest.records.len()
    );
    Ok(manifest)
}

/// Read access to a cache written by [`cache_teacher_outputs`].
#[derive(Clone, Debug)]
pub struct TeacherCache {
    dir: PathBuf,
    manifest: CacheManifest,
}

impl TeacherCache {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::MissingTeacherCache(format!("no cache manifest at {}", path.display())));
        }
        Ok(Self {
            dir: dir.to_owned(),
            manifest: fsutil::read_json(&path)?,
        })
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn teacher_hash(&self) -> &str {
        &self.manifest.teacher_hash
    }

    pub fn contains(&self, article_id: &str) -> bool {
        self.manifest.records.iter().any(|r| r.article_id == article_id)
    }

    fn half(&self, article_id: &str, side: &str) -> Result<Half> {
        let (hash, classes) = match side {
            "local" => (&self.manifest.relation_hash, 4),
            _ => (&self.manifest.role_hash, 8),
        };
        let path = half_path(&self.dir, side, &file_stem(article_id));
        if !path.exists() {
            return Err(Error::MissingTeacherCache(format!("article {article_id} ({side} record absent)")));
        }
        read_half(&path, article_id, hash, classes)
            .ok_or_else(|| Error::MissingTeacherCache(format!("article {article_id} ({side} record stale or corrupted)")))
    }

    /// Reads only the requested halves.
    pub fn signals(&self, article_id: &str, local: bool, global: bool) -> Result<TeacherSignals> {
        let local = if local {
            let h = self.half(article_id, "local")?;
            Some((h.probs, h.embeddings))
        } else {
            None
        };
        let global = if global {
            let h = self.half(article_id, "global")?;
            Some((h.probs, h.embeddings))
        } else {
            None
        };
        Ok(TeacherSignals { local, global })
    }

    pub fn outputs(&self, article_id: &str) -> Result<TeacherOutputs> {
        let l = self.half(article_id, "local")?;
        let g = self.half(article_id, "global")?;
        if l.probs.nrows() != g.probs.nrows() {
            return Err(Error::MissingTeacherCache(format!(
                "article {article_id} (local and global records disagree on sentence count)"
            )));
        }
        Ok(TeacherOutputs {
            article_id: article_id.to_owned(),
            p_local: l.probs,
            p_global: g.probs,
            s_local: l.embeddings,
            s_global: g.embeddings,
            teacher_hash: self.manifest.teacher_hash.clone(),
        })
    }
}
