//! Leave-last-out evaluation against full-catalog rankings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::debias::{fairness_report, FairnessReport};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, popularity_ranking, random_ranking, EvalReport, MetricInputs, RankedList, ReportTable};
use crate::generator::{masked_softmax, rank_distribution};
use crate::numerics::Rng;
use crate::retrieval::ContextEntry;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::model::{item_embeddings, next_item_scores, NextItem, retrieval_index, retrieve_context, stack_options, ModelParams, Resources};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    /// First validation event, history = training events.
    Validation,
    /// Held-out last event, history = training and validation events.
    Test,
}

/// One user's evaluation case.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub user: usize,
    pub history: Vec<usize>,
    pub target: usize,
}

pub fn eval_cases(data: &Dataset, split: EvalSplit) -> Vec<EvalCase> {
    let mut out = Vec::new();
    for u in 0..data.n_users() {
        let mut history: Vec<usize> = data.train_events(u).iter().map(|&e| data.events[e].item).collect();
        let target = match split {
            EvalSplit::Validation => data.validation_events(u).first().map(|&e| data.events[e].item),
            EvalSplit::Test => {
                history.extend(data.validation_events(u).iter().map(|&e| data.events[e].item));
                data.test_event(u).map(|e| data.events[e].item)
            }
        };
        if let Some(target) = target {
            out.push(EvalCase { user: u, history, target });
        }
    }
    out
}

pub fn anchor_time(data: &Dataset, split: EvalSplit) -> i64 {
    match split {
        EvalSplit::Validation => data.split.train_boundary,
        EvalSplit::Test => data.split.eval_boundary,
    }
}

/// Masked distribution and raw model outputs for one history.
pub struct Scored {
    /// Ranking distribution over the catalog, seen items at zero.
    pub probs: Vec<f64>,
    pub next: NextItem,
}

/// Everything needed to score users with a fixed set of parameters.
pub struct Scorer<'a> {
    pub model: &'a ModelParams,
    pub res: &'a Resources,
    pub cfg: &'a ExperimentConfig,
    pub index: Vec<ContextEntry>,
    pub embeddings: Vec<Vec<f64>>,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a ModelParams, data: &Dataset, res: &'a Resources, cfg: &'a ExperimentConfig) -> Result<Self> {
        let embeddings = item_embeddings(model, res, stack_options(cfg))?;
        let index = if cfg.context_k() > 0 {
            retrieval_index(data, res, &embeddings)?
        } else {
            Vec::new()
        };
        Ok(Scorer {
            model,
            res,
            cfg,
            index,
            embeddings,
        })
    }

    /// Distribution over unseen items given the full history.
    pub fn score(&self, history: &[usize], t_current: i64) -> Result<Scored> {
        let opts = stack_options(self.cfg);
        let trimmed = self.res.trim(history);
        let context = if self.cfg.context_k() > 0 {
            retrieve_context(self.model, self.res, &self.index, trimmed, t_current, opts, &self.cfg.retrieval)?
        } else {
            Vec::new()
        };
        let next = next_item_scores(self.model, self.res, trimmed, &context, opts, self.cfg.flags.debias)?;
        let probs = if self.cfg.flags.debias {
            let mut p = next.scores.clone();
            for &i in history {
                p[i] = 0.0;
            }
            let z: f64 = p.iter().sum();
            if !(z > 0.0) {
                return Err(Error::Numerical("adjusted scores vanished".into()));
            }
            p.iter_mut().for_each(|v| *v /= z);
            p
        } else {
            masked_softmax(&next.scores, history)?
        };
        Ok(Scored { probs, next })
    }
}

/// Model lists, the per-user predicted rating of the held-out item, and
/// the evaluation cases they came from.
pub struct ModelRankings {
    pub lists: Vec<RankedList>,
    pub target_ratings: Vec<f64>,
    pub cases: Vec<EvalCase>,
}

pub fn rank_users(scorer: &Scorer, data: &Dataset, split: EvalSplit) -> Result<ModelRankings> {
    let cases = eval_cases(data, split);
    if cases.is_empty() {
        return Err(Error::data("evaluation split is empty"));
    }
    let t = anchor_time(data, split);
    let mut lists = Vec::with_capacity(cases.len());
    let mut target_ratings = Vec::with_capacity(cases.len());
    for c in &cases {
        let s = scorer.score(&c.history, t)?;
        target_ratings.push(s.next.rating(scorer.model, c.target));
        let ranked = rank_distribution(&s.probs, &c.history, scorer.cfg.train.list_length)?;
        let (items, scores) = ranked.items.into_iter().unzip();
        lists.push(RankedList::new(data.users[c.user].user_id.clone(), items, scores)?);
    }
    Ok(ModelRankings {
        lists,
        target_ratings,
        cases,
    })
}

/// Parity of the held-out item's predicted rating across groups.
pub fn target_parity(data: &Dataset, rankings: &ModelRankings, cfg: &ExperimentConfig) -> Result<FairnessReport> {
    let mut by_group = vec![Vec::new(); data.groups.len()];
    for (c, p) in rankings.cases.iter().zip(&rankings.target_ratings) {
        by_group[data.users[c.user].group_label].push(*p);
    }
    fairness_report(&data.groups, &by_group, cfg.debias.fairness.tau, cfg.debias.fairness.epsilon)
}

/// Model, popularity and random rows on one split.
pub fn evaluate(model: &ModelParams, data: &Dataset, res: &Resources, cfg: &ExperimentConfig, split: EvalSplit) -> Result<ReportTable> {
    let scorer = Scorer::new(model, data, res, cfg)?;
    let rankings = rank_users(&scorer, data, split)?;
    let truth: BTreeMap<String, usize> = rankings
        .cases
        .iter()
        .map(|c| (data.users[c.user].user_id.clone(), c.target))
        .collect();
    let groups: BTreeMap<String, usize> = data.users.iter().map(|u| (u.user_id.clone(), u.group_label)).collect();
    let inputs = MetricInputs {
        truth: &truth,
        cutoffs: &cfg.train.cutoffs,
        embeddings: &scorer.embeddings,
        popularity: &res.popularity,
        groups: &groups,
        n_groups: data.groups.len(),
        fairness_tau: cfg.debias.fairness.tau,
    };
    let n = cfg.train.list_length;
    let mut rng = Rng::new(cfg.seed).fork(99);
    let mut popular = Vec::with_capacity(rankings.cases.len());
    let mut random = Vec::with_capacity(rankings.cases.len());
    for c in &rankings.cases {
        let id = &data.users[c.user].user_id;
        popular.push(popularity_ranking(id, &res.popularity, &c.history, n)?);
        random.push(random_ranking(id, data.n_items(), &c.history, n, &mut rng)?);
    }

    let mut model_metrics = compute_metrics(&rankings.lists, &inputs)?;
    if data.groups.len() >= 2 {
        model_metrics.insert("parity_gap".into(), target_parity(data, &rankings, cfg)?.gap);
    }
    let row = |system: &str, metrics| EvalReport {
        system: system.into(),
        metrics,
        cutoffs: cfg.train.cutoffs.clone(),
        dataset_id: data.fingerprint(),
        config_hash: cfg.hash().unwrap_or_default(),
        seed: cfg.seed,
        users: rankings.cases.len(),
        skipped: data.n_users() - rankings.cases.len(),
    };
    Ok(ReportTable {
        rows: vec![
            row("model", model_metrics),
            row("popularity", compute_metrics(&popular, &inputs)?),
            row("random", compute_metrics(&random, &inputs)?),
        ],
    })
}

/// Evaluates a checkpoint on the dataset it was trained on.
pub fn evaluate_checkpoint(ck: &Checkpoint, data: &Dataset, split: EvalSplit) -> Result<ReportTable> {
    ck.check_dataset(data)?;
    let res = Resources::new(data, &ck.config)?;
    evaluate(&ck.state.model, data, &res, &ck.config, split)
}
