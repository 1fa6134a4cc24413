//! Recommendation and explanation responses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::explain::{
    context_vector, preference_distribution, preference_explanation_prob, select_and_render, similar_from_history, time_bucket,
    trend_bucket, ExplanationDecision, ExplanationType, Signals, TIME_BUCKETS, TREND_BUCKETS,
};
use crate::generator::rank_distribution;

use super::config::ExperimentConfig;
use super::evaluate::{anchor_time, EvalSplit, Scored, Scorer};
use super::model::{ModelParams, Resources};
use super::online::known_histories;

/// Window for the item trend signal.
const TREND_WINDOW: i64 = 30 * 86_400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    /// `α_pref`, `α_sim`, `α_context`.
    pub weights: [f64; 3],
    pub template: String,
    pub slots: BTreeMap<String, String>,
    /// `Π_k p_u(a_k) P(item | a_k)` over the top covering aspects.
    pub preference_prob: f64,
    /// Most similar history items with their cosine.
    pub similar: Vec<(String, f64)>,
    /// Attention over the time, location and trend rows.
    pub context_weights: Vec<f64>,
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub rank: usize,
    pub item: String,
    pub title: String,
    pub score: f64,
    pub explanation_text: String,
    pub explanation_type: ExplanationType,
    pub evidence: Evidence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub user: String,
    pub config_hash: String,
    pub seed: u64,
    /// Fewer unseen items than requested.
    pub truncated: bool,
    pub items: Vec<Recommendation>,
}

/// Scores users against their full known history at the end of the data.
pub struct Server<'a> {
    scorer: Scorer<'a>,
    data: &'a Dataset,
    histories: Vec<Vec<usize>>,
    t_current: i64,
}

impl<'a> Server<'a> {
    pub fn new(model: &'a ModelParams, data: &'a Dataset, res: &'a Resources, cfg: &'a ExperimentConfig) -> Result<Self> {
        Ok(Server {
            scorer: Scorer::new(model, data, res, cfg)?,
            data,
            histories: known_histories(data, true),
            t_current: anchor_time(data, EvalSplit::Test),
        })
    }

    fn user(&self, user_id: &str) -> Result<usize> {
        self.data
            .user_idx(user_id)
            .ok_or_else(|| Error::data(format!("unknown user {user_id}")))
    }

    fn response(&self, u: usize, items: Vec<Recommendation>, truncated: bool) -> Result<Response> {
        Ok(Response {
            user: self.data.users[u].user_id.clone(),
            config_hash: self.scorer.cfg.hash()?,
            seed: self.scorer.cfg.seed,
            truncated,
            items,
        })
    }

    pub fn recommend(&self, user_id: &str, n: usize) -> Result<Response> {
        if n == 0 {
            return Err(Error::invalid("list length must be positive"));
        }
        let u = self.user(user_id)?;
        let history = &self.histories[u];
        let scored = self.scorer.score(history, self.t_current)?;
        let ranked = rank_distribution(&scored.probs, history, n)?;
        let items = ranked
            .items
            .iter()
            .enumerate()
            .map(|(r, &(i, score))| self.explained(u, &scored, i, r + 1, score))
            .collect::<Result<Vec<_>>>()?;
        self.response(u, items, ranked.truncated)
    }

    /// Explanation for one user-item pair, ranked where the model would put it.
    pub fn explain(&self, user_id: &str, item_id: &str) -> Result<Response> {
        let u = self.user(user_id)?;
        let i = self
            .data
            .item_idx(item_id)
            .ok_or_else(|| Error::data(format!("unknown item {item_id}")))?;
        let history = &self.histories[u];
        let scored = self.scorer.score(history, self.t_current)?;
        let score = scored.probs[i];
        let rank = 1 + scored
            .probs
            .iter()
            .enumerate()
            .filter(|&(j, &p)| p > score || (p == score && j < i))
            .count();
        let item = self.explained(u, &scored, i, rank, score)?;
        self.response(u, vec![item], false)
    }

    fn trend(&self, item: usize) -> usize {
        let t = self.t_current;
        let (mut recent, mut previous) = (0, 0);
        for e in &self.data.events {
            if e.item != item || e.timestamp > t {
                continue;
            }
            if e.timestamp > t - TREND_WINDOW {
                recent += 1;
            } else if e.timestamp > t - 2 * TREND_WINDOW {
                previous += 1;
            }
        }
        trend_bucket(recent, previous)
    }

    fn explained(&self, u: usize, scored: &Scored, item: usize, rank: usize, score: f64) -> Result<Recommendation> {
        let model = self.scorer.model;
        let res = self.scorer.res;
        let cfg = self.scorer.cfg;
        let h = &scored.next.h_user;
        let title = |i: usize| self.data.items[i].title.clone();

        let mut preference_prob = 0.0;
        let preference = if cfg.flags.explain && res.aspects.len() >= 2 {
            let p_u = preference_distribution(h, &model.preference)?;
            preference_prob = preference_explanation_prob(&p_u, item, &res.aspects, cfg.explain.top_aspects);
            res.aspects
                .covering(item)
                .into_iter()
                .max_by(|&a, &b| p_u[a].total_cmp(&p_u[b]).then(b.cmp(&a)))
                .map(|a| (p_u[a], res.aspects.names[a].clone()))
        } else {
            None
        };

        let history = &self.histories[u];
        let emb = &self.scorer.embeddings;
        let similar = if history.is_empty() {
            Vec::new()
        } else {
            let hist: Vec<(usize, Vec<f64>)> = history.iter().map(|&i| (i, emb[i].clone())).collect();
            similar_from_history(&emb[item], &hist, cfg.explain.similar)?
        };
        let similarity = similar.first().map(|&(i, s)| (s, title(i)));

        let tb = time_bucket(self.t_current);
        let trend = self.trend(item);
        let ctx = context_vector(h, &model.context.rows(tb, trend)?, &model.context)?;
        let (best, weight) = ctx
            .weights
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &w)| if w > acc.1 { (k, w) } else { acc });
        let descriptor = match best {
            0 => TIME_BUCKETS[tb].to_string(),
            1 => "your usual setting".to_string(),
            _ => TREND_BUCKETS[trend].to_string(),
        };

        let e = select_and_render(&Signals {
            item_title: title(item),
            preference,
            similarity,
            context: Some((weight, descriptor)),
        });
        let ExplanationDecision {
            kind,
            weights,
            template,
            slots,
        } = e.decision;
        Ok(Recommendation {
            rank,
            item: self.data.items[item].item_id.clone(),
            title: title(item),
            score,
            explanation_text: e.text,
            explanation_type: kind,
            evidence: Evidence {
                weights,
                template,
                slots,
                preference_prob,
                similar: similar.iter().map(|&(i, s)| (self.data.items[i].item_id.clone(), s)).collect(),
                context_weights: ctx.weights,
                fallback: e.fallback,
            },
        })
    }
}
