//! Typed, templated explanations.
//!
//! Three signals compete for each recommended item:
//!
//! * preference: the user's predicted aspect distribution, as the largest
//!   aspect mass among aspects that contain the item;
//! * similarity: the best cosine between the item and the user's history;
//! * context: the sharpest attention weight of the user state over
//!   time-of-day, location and trend embeddings.
//!
//! The largest weight picks a template (ties resolve preference, then
//! similarity, then context) whose slots are filled with concrete evidence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::cross_attention_forward;
use crate::numerics::tensor::{norm, outer_acc, vec_mat};
use crate::numerics::{cosine, softmax, Rng, Tensor};

pub const MAX_EXPLANATION_CHARS: usize = 400;

pub const TIME_BUCKETS: [&str; 6] = ["late night", "early morning", "morning", "afternoon", "evening", "night"];
pub const TREND_BUCKETS: [&str; 3] = ["cooling off", "steady", "trending up"];

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceHead {
    /// `[d × A]`
    pub w: Tensor,
    pub b: Tensor,
}
crate::impl_params!(PreferenceHead { w, b });

impl PreferenceHead {
    pub fn new(d: usize, aspects: usize, rng: &mut Rng) -> Result<Self> {
        if aspects < 2 {
            return Err(Error::invalid("a preference head needs at least two aspects"));
        }
        Ok(PreferenceHead {
            w: Tensor::uniform(&[d, aspects], 0.1, rng),
            b: Tensor::zeros(&[aspects]),
        })
    }

    pub fn aspects(&self) -> usize {
        self.b.len()
    }
}

/// `softmax(h W + b)`.
pub fn preference_distribution(h: &[f64], head: &PreferenceHead) -> Result<Vec<f64>> {
    let mut z = vec_mat(h, &head.w)?;
    for (o, b) in z.iter_mut().zip(head.b.data()) {
        *o += b;
    }
    softmax(&z)
}

/// Cross-entropy of the head's distribution against a target distribution,
/// with gradients accumulated into `g` (scaled by `scale`). `h` is treated as
/// a constant.
pub fn preference_loss(h: &[f64], target: &[f64], head: &PreferenceHead, scale: f64, g: &mut PreferenceHead) -> Result<f64> {
    if target.len() != head.aspects() {
        return Err(Error::shape("target width differs from aspect count"));
    }
    let p = preference_distribution(h, head)?;
    let loss = -target
        .iter()
        .zip(&p)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, q)| t * q.max(f64::MIN_POSITIVE).ln())
        .sum::<f64>();
    let mass: f64 = target.iter().sum();
    let dz: Vec<f64> = p.iter().zip(target).map(|(q, t)| scale * (mass * q - t)).collect();
    outer_acc(&mut g.w, h, &dz)?;
    for (o, v) in g.b.data_mut().iter_mut().zip(&dz) {
        *o += v;
    }
    Ok(loss)
}

/// Aspect vocabulary: the most frequent categories and, per aspect, the items
/// it contains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aspects {
    /// Category id of each aspect.
    pub categories: Vec<usize>,
    pub names: Vec<String>,
    /// Item indices per aspect, ascending.
    pub members: Vec<Vec<usize>>,
}

impl Aspects {
    /// Top `limit` categories by `frequency`, ties by ascending category id.
    pub fn top(
        frequency: &[usize],
        names: &[String],
        item_categories: &[Vec<usize>],
        limit: usize,
    ) -> Result<Self> {
        let mut order: Vec<usize> = (0..frequency.len()).collect();
        order.sort_by(|&a, &b| frequency[b].cmp(&frequency[a]).then(a.cmp(&b)));
        order.truncate(limit);
        if order.len() < 2 {
            return Err(Error::invalid("fewer than two aspects available"));
        }
        let mut members = vec![Vec::new(); order.len()];
        for (item, cats) in item_categories.iter().enumerate() {
            for (a, c) in order.iter().enumerate() {
                if cats.contains(c) {
                    members[a].push(item);
                }
            }
        }
        Ok(Aspects {
            names: order.iter().map(|&c| names[c].clone()).collect(),
            categories: order,
            members,
        })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// Aspects containing `item`.
    pub fn covering(&self, item: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&a| self.members[a].binary_search(&item).is_ok())
            .collect()
    }

    /// `P(item | aspect)`: uniform over the aspect's members.
    pub fn item_given_aspect(&self, item: usize, aspect: usize) -> f64 {
        let m = &self.members[aspect];
        if m.binary_search(&item).is_ok() {
            1.0 / m.len() as f64
        } else {
            0.0
        }
    }

    /// Normalized histogram of a user's history over aspects.
    pub fn histogram(&self, history_categories: &[&[usize]]) -> Option<Vec<f64>> {
        let mut h = vec![0.0; self.len()];
        for cats in history_categories {
            for (a, c) in self.categories.iter().enumerate() {
                if cats.contains(c) {
                    h[a] += 1.0;
                }
            }
        }
        let total: f64 = h.iter().sum();
        if total == 0.0 {
            return None;
        }
        h.iter_mut().for_each(|v| *v /= total);
        Some(h)
    }
}

/// `Π_k p_u(a_k) P(item | a_k)` over the `k` covering aspects with the most
/// user mass; zero when no aspect covers the item. A ranking weight, not a
/// calibrated probability.
pub fn preference_explanation_prob(p_u: &[f64], item: usize, aspects: &Aspects, k: usize) -> f64 {
    let mut cover = aspects.covering(item);
    if cover.is_empty() || k == 0 {
        return 0.0;
    }
    cover.sort_by(|&a, &b| p_u[b].total_cmp(&p_u[a]).then(a.cmp(&b)));
    cover
        .iter()
        .take(k)
        .map(|&a| p_u[a] * aspects.item_given_aspect(item, a))
        .product()
}

/// Top `k` history items by cosine to `target`, ties by ascending item id.
/// History items with a zero embedding are ignored.
pub fn similar_from_history(target: &[f64], history: &[(usize, Vec<f64>)], k: usize) -> Result<Vec<(usize, f64)>> {
    if history.is_empty() {
        return Err(Error::invalid("empty history"));
    }
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for (id, e) in history {
        if norm(e) == 0.0 {
            continue;
        }
        scored.push((*id, cosine(target, e)?));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.dedup_by_key(|s| s.0);
    scored.truncate(k);
    Ok(scored)
}

/// Time-of-day and trend embeddings and the attention that reads them.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextAttention {
    pub time: Tensor,
    pub trend: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}
crate::impl_params!(ContextAttention { time, trend, wq, wk, wv });

impl ContextAttention {
    pub fn new(d: usize, dk: usize, rng: &mut Rng) -> Self {
        ContextAttention {
            time: Tensor::uniform(&[TIME_BUCKETS.len(), d], 1.0, rng),
            trend: Tensor::uniform(&[TREND_BUCKETS.len(), d], 1.0, rng),
            wq: Tensor::fan_in_uniform(&[d, dk], rng),
            wk: Tensor::fan_in_uniform(&[d, dk], rng),
            wv: Tensor::fan_in_uniform(&[d, d], rng),
        }
    }

    /// `[h_time; h_location; h_trend]` with a zero location row.
    pub fn rows(&self, time_bucket: usize, trend_bucket: usize) -> Result<Tensor> {
        if time_bucket >= self.time.rows() || trend_bucket >= self.trend.rows() {
            return Err(Error::invalid("context bucket out of range"));
        }
        let d = self.time.cols();
        Tensor::from_rows(
            &[
                self.time.row(time_bucket).to_vec(),
                vec![0.0; d],
                self.trend.row(trend_bucket).to_vec(),
            ],
            d,
        )
    }
}

pub fn time_bucket(timestamp: i64) -> usize {
    (timestamp.rem_euclid(86_400) / (4 * 3_600)) as usize
}

/// Falling, steady or rising, from interaction counts in the latest window
/// versus the one before it.
pub fn trend_bucket(recent: usize, previous: usize) -> usize {
    let (r, p) = (recent as f64, previous as f64);
    if r > 1.25 * p + 0.5 {
        2
    } else if r + 0.5 < 0.8 * p {
        0
    } else {
        1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextVector {
    pub c: Vec<f64>,
    /// Attention weights over the context rows.
    pub weights: Vec<f64>,
}

/// Attention of the query `h` over the context rows; `c` is a convex
/// combination of the value-projected rows.
pub fn context_vector(h: &[f64], rows: &Tensor, p: &ContextAttention) -> Result<ContextVector> {
    let q = Tensor::from_rows(&[h.to_vec()], h.len())?;
    let cache = cross_attention_forward(&q, rows, &p.wq, &p.wk, &p.wv, false)?;
    Ok(ContextVector {
        c: cache.z.row(0).to_vec(),
        weights: cache.a.row(0).to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplanationType {
    Preference,
    Similarity,
    Contextual,
    Fallback,
}

/// Evidence available for one `(user, item)` pair. `None` marks a type as
/// unavailable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Signals {
    pub item_title: String,
    /// `(α_pref, aspect name)`
    pub preference: Option<(f64, String)>,
    /// `(α_sim, neighbor title)`
    pub similarity: Option<(f64, String)>,
    /// `(α_context, descriptor)`
    pub context: Option<(f64, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationDecision {
    pub kind: ExplanationType,
    /// `α_pref`, `α_sim`, `α_context`; zero for unavailable types.
    pub weights: [f64; 3],
    pub template: String,
    pub slots: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub text: String,
    pub decision: ExplanationDecision,
    /// No typed evidence was available and the generic template was used.
    pub fallback: bool,
}

fn template(kind: ExplanationType) -> (&'static str, &'static str) {
    match kind {
        ExplanationType::Preference => (
            "preference.v1",
            "Recommended because you often pick {aspect} titles, and {item} fits that taste.",
        ),
        ExplanationType::Similarity => (
            "similarity.v1",
            "Recommended because {item} is close to {neighbor}, which you engaged with before.",
        ),
        ExplanationType::Contextual => (
            "context.v1",
            "Recommended for the current context ({context}): {item}.",
        ),
        ExplanationType::Fallback => (
            "fallback.v1",
            "Recommended from overall activity patterns: {item}.",
        ),
    }
}

/// Fills `{name}` slots. Pure in `(template, slots)`.
pub fn render(template_text: &str, slots: &BTreeMap<String, String>) -> String {
    let mut out = template_text.to_string();
    for (k, v) in slots {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    truncate_chars(&out, MAX_EXPLANATION_CHARS)
}

fn truncate_chars(s: &str, max: usize) -> String {
    if s.chars().count() <= max {
        return s.to_string();
    }
    let mut t: String = s.chars().take(max - 1).collect();
    t.push('…');
    t
}

fn clamp_unit(x: f64) -> f64 {
    if x.is_finite() {
        x.clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Picks the dominant available type and renders its template.
pub fn select_and_render(signals: &Signals) -> Explanation {
    let weights = [
        signals.preference.as_ref().map_or(0.0, |s| clamp_unit(s.0)),
        signals.similarity.as_ref().map_or(0.0, |s| clamp_unit(s.0)),
        signals.context.as_ref().map_or(0.0, |s| clamp_unit(s.0)),
    ];
    let available = [
        signals.preference.is_some(),
        signals.similarity.is_some(),
        signals.context.is_some(),
    ];
    let mut best: Option<usize> = None;
    for t in 0..3 {
        if available[t] && best.map_or(true, |b| weights[t] > weights[b]) {
            best = Some(t);
        }
    }
    let mut slots = BTreeMap::new();
    slots.insert("item".to_string(), signals.item_title.clone());
    let kind = match best {
        Some(0) => {
            slots.insert("aspect".into(), signals.preference.as_ref().expect("available").1.clone());
            ExplanationType::Preference
        }
        Some(1) => {
            slots.insert("neighbor".into(), signals.similarity.as_ref().expect("available").1.clone());
            ExplanationType::Similarity
        }
        Some(_) => {
            slots.insert("context".into(), signals.context.as_ref().expect("available").1.clone());
            ExplanationType::Contextual
        }
        None => ExplanationType::Fallback,
    };
    let (id, text) = template(kind);
    Explanation {
        text: render(text, &slots),
        decision: ExplanationDecision {
            kind,
            weights,
            template: id.to_string(),
            slots,
        },
        fallback: kind == ExplanationType::Fallback,
    }
}
