//! In-dataset context retrieval.
//!
//! The index holds one entry per item plus one centroid per category. A query
//! vector is scored against every entry by a weighted sum of cosine
//! similarity, Gaussian temporal relevance and a popularity-based credibility,
//! and the top `K` entries become soft context tokens for the generator.
//! Scoring is an exhaustive linear scan, so results are exact.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::io;
use crate::error::{Error, Result};
use crate::numerics::cosine;
use crate::numerics::tensor::{dot, norm};

pub const DAY_SECONDS: f64 = 86_400.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Item,
    Category,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub entry_id: usize,
    pub kind: EntryKind,
    /// Item id for item entries, category name for centroids.
    pub source_id: String,
    /// Dense item index for item entries, category index for centroids.
    pub source_index: usize,
    pub embedding: Vec<f64>,
    pub timestamp: i64,
    pub credibility: f64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k: usize,
    /// Weights of similarity, temporal relevance and credibility.
    pub lambda: [f64; 3],
    /// Temporal width in seconds.
    pub sigma: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 2,
            lambda: [0.6, 0.2, 0.2],
            sigma: 30.0 * DAY_SECONDS,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::invalid("retrieval weights must be finite and nonnegative"));
        }
        if self.lambda.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("retrieval weights must not all be zero"));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid("temporal width must be positive"));
        }
        Ok(())
    }
}

/// One scored entry. `score = λ1·similarity + λ2·temporal + λ3·credibility`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub entry: ContextEntry,
    pub score: f64,
    pub similarity: f64,
    pub temporal: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub entries: Vec<Scored>,
}

impl RetrievedContext {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn embeddings(&self) -> Vec<&[f64]> {
        self.entries.iter().map(|s| s.entry.embedding.as_slice()).collect()
    }
}

/// What the index needs to know about one item.
#[derive(Clone, Debug)]
pub struct IndexSource<'a> {
    pub item_id: &'a str,
    pub description: &'a str,
    pub categories: &'a [usize],
    pub embedding: Vec<f64>,
    /// Latest training interaction time, 0 if none.
    pub timestamp: i64,
    pub review_count: usize,
}

/// `ln(1 + count) / ln(1 + max_count)`, capped at 1; zero when nothing has
/// been reviewed.
pub fn credibility(count: usize, max_count: usize) -> f64 {
    if max_count == 0 {
        return 0.0;
    }
    ((1.0 + count as f64).ln() / (1.0 + max_count as f64).ln()).min(1.0)
}

/// Item entries in input order, then one centroid per category that has at
/// least one member. Items with neither text nor categories, or with a zero
/// embedding, are skipped.
pub fn build_index(items: &[IndexSource], category_names: &[String]) -> Result<Vec<ContextEntry>> {
    let max_count = items.iter().map(|s| s.review_count).max().unwrap_or(0);
    let mut entries = Vec::new();
    let n_cat = category_names.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_cat];
    for (idx, src) in items.iter().enumerate() {
        if src.description.trim().is_empty() && src.categories.is_empty() {
            log::warn!("item {} has no description and no categories; not indexed", src.item_id);
            continue;
        }
        if norm(&src.embedding) == 0.0 || !src.embedding.iter().all(|v| v.is_finite()) {
            log::warn!("item {} has a degenerate embedding; not indexed", src.item_id);
            continue;
        }
        for &c in src.categories {
            if c >= n_cat {
                return Err(Error::invalid(format!("category index {c} out of range")));
            }
            members[c].push(entries.len());
        }
        entries.push(ContextEntry {
            entry_id: entries.len(),
            kind: EntryKind::Item,
            source_id: src.item_id.to_string(),
            source_index: idx,
            embedding: src.embedding.clone(),
            timestamp: src.timestamp,
            credibility: credibility(src.review_count, max_count),
            text: src.description.to_string(),
        });
    }
    let n_items = entries.len();
    for (c, ids) in members.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let d = entries[ids[0]].embedding.len();
        let mut centroid = vec![0.0; d];
        for &e in ids {
            for (o, v) in centroid.iter_mut().zip(&entries[e].embedding) {
                *o += v;
            }
        }
        let n = ids.len() as f64;
        centroid.iter_mut().for_each(|v| *v /= n);
        if norm(&centroid) == 0.0 {
            log::warn!("category {} centroid is zero; not indexed", category_names[c]);
            continue;
        }
        let timestamp = ids.iter().map(|&e| entries[e].timestamp).max().unwrap_or(0);
        let cred = ids.iter().map(|&e| entries[e].credibility).sum::<f64>() / n;
        entries.push(ContextEntry {
            entry_id: entries.len(),
            kind: EntryKind::Category,
            source_id: category_names[c].clone(),
            source_index: c,
            embedding: centroid,
            timestamp,
            credibility: cred,
            text: format!("category {} ({} items)", category_names[c], ids.len()),
        });
    }
    debug_assert!(entries[n_items..].iter().all(|e| e.kind == EntryKind::Category));
    Ok(entries)
}

/// `exp(-Δt² / (2σ²))` with `Δt` in seconds.
pub fn temporal_relevance(t_current: i64, t_j: i64, sigma: f64) -> f64 {
    let dt = (t_current - t_j) as f64;
    (-(dt * dt) / (2.0 * sigma * sigma)).exp()
}

pub fn relevance_score(q: &[f64], t_current: i64, entry: &ContextEntry, config: &RetrievalConfig) -> Result<Scored> {
    let similarity = cosine(q, &entry.embedding)?;
    let temporal = temporal_relevance(t_current, entry.timestamp, config.sigma);
    let [l1, l2, l3] = config.lambda;
    Ok(Scored {
        entry: entry.clone(),
        score: l1 * similarity + l2 * temporal + l3 * entry.credibility,
        similarity,
        temporal,
    })
}

fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// The `K` best entries by score, ties broken by ascending `entry_id`.
/// `K = 0` yields an empty context.
pub fn retrieve_top_k(
    q: &[f64],
    t_current: i64,
    index: &[ContextEntry],
    config: &RetrievalConfig,
) -> Result<RetrievedContext> {
    if config.k == 0 {
        return Ok(RetrievedContext::default());
    }
    if index.is_empty() {
        return Err(Error::invalid("retrieval over an empty index"));
    }
    if norm(q) == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let [l1, l2, l3] = config.lambda;
    let qn = norm(q);
    // (score, entry_id, position in the slice)
    let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(index.len());
    for (pos, e) in index.iter().enumerate() {
        if e.embedding.len() != q.len() {
            return Err(Error::shape("query and index widths differ"));
        }
        let sim = (dot(q, &e.embedding) / (qn * norm(&e.embedding))).clamp(-1.0, 1.0);
        let s = l1 * sim + l2 * temporal_relevance(t_current, e.timestamp, config.sigma) + l3 * e.credibility;
        scored.push((s, e.entry_id, pos));
    }
    let order = |a: &(f64, usize, usize), b: &(f64, usize, usize)| rank_order(&(a.0, a.1), &(b.0, b.1));
    let k = config.k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    let entries = scored
        .into_iter()
        .map(|(_, _, pos)| relevance_score(q, t_current, &index[pos], config))
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievedContext { entries })
}

pub fn dump_index(path: &Path, index: &[ContextEntry]) -> Result<()> {
    io::write_jsonl(path, index)
}

pub fn load_index(path: &Path) -> Result<Vec<ContextEntry>> {
    let entries: Vec<ContextEntry> = io::read_jsonl(path)?;
    for e in &entries {
        if norm(&e.embedding) == 0.0 {
            return Err(Error::data(format!("entry {} has a zero embedding", e.entry_id)));
        }
        if !(0.0..=1.0).contains(&e.credibility) {
            return Err(Error::data(format!("entry {} credibility out of range", e.entry_id)));
        }
    }
    Ok(entries)
}
