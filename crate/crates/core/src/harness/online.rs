//! Online adaptation to a feedback stream.
//!
//! Every event is one update: the model's entropy over unseen items sets the
//! step size, reliability of each feedback kind sets the explicit and implicit
//! weights, and a selective momentum step applies the combined loss plus any
//! EWC anchor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptive::{adaptive_rate, combined_feedback_loss, normalized_entropy, reliability_weights, selective_step, StepOutcome};
use crate::dataset::{io, Dataset, FeedbackKind};
use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::model::{batch_loss, item_embeddings, retrieval_index, stack_options, Example, LossOptions, Resources};
use super::train::{attach_context, clip, consolidate, loss_options, reset_momentum, train, TrainState, Trained};

/// One line of a feedback stream. `value` is the rating for explicit events
/// and a nonnegative weight on the next-item term for implicit ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub user: String,
    pub item: String,
    pub kind: FeedbackKind,
    pub value: f64,
    pub timestamp: i64,
}

impl FeedbackEvent {
    fn positive(&self, threshold: f64) -> bool {
        match self.kind {
            FeedbackKind::Explicit => self.value >= threshold,
            FeedbackKind::Implicit => self.value > 0.0,
        }
    }
}

pub fn read_events(path: &Path) -> Result<Vec<FeedbackEvent>> {
    io::read_jsonl(path)
}

/// Validation interactions as a feedback stream, ordered by time then user.
pub fn validation_feedback(data: &Dataset) -> Vec<FeedbackEvent> {
    let mut events: Vec<usize> = (0..data.n_users()).flat_map(|u| data.validation_events(u).iter().copied()).collect();
    events.sort_by_key(|&e| (data.events[e].timestamp, data.events[e].user, e));
    events
        .into_iter()
        .map(|e| {
            let ev = &data.events[e];
            FeedbackEvent {
                user: data.users[ev.user].user_id.clone(),
                item: data.items[ev.item].item_id.clone(),
                kind: if ev.rating.is_some() {
                    FeedbackKind::Explicit
                } else {
                    FeedbackKind::Implicit
                },
                value: ev.rating.unwrap_or(1.0),
                timestamp: ev.timestamp,
            }
        })
        .collect()
}

/// Item histories per user: training events, plus validation events when
/// `with_validation` is set.
pub fn known_histories(data: &Dataset, with_validation: bool) -> Vec<Vec<usize>> {
    (0..data.n_users())
        .map(|u| {
            let mut h: Vec<usize> = data.train_events(u).iter().map(|&e| data.events[e].item).collect();
            if with_validation {
                h.extend(data.validation_events(u).iter().map(|&e| data.events[e].item));
            }
            h
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub event: usize,
    pub user: String,
    pub item: String,
    pub kind: FeedbackKind,
    /// Normalized entropy of the next-item distribution over unseen items.
    pub uncertainty: f64,
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub updated_fraction: f64,
    /// Combined feedback loss plus the EWC penalty.
    pub loss: f64,
    pub nll: f64,
    pub squared_error: Option<f64>,
    pub ewc: f64,
    /// No update: the user had no history yet or the gradient was not finite.
    pub skipped: bool,
}

fn share_category(data: &Dataset, a: usize, b: usize) -> bool {
    let cb = &data.items[b].categories;
    data.items[a].categories.iter().any(|c| cb.contains(c))
}

/// Applies `events` in order, one selective momentum step each, extending
/// `histories` as it goes. Momentum restarts at the beginning of the session.
///
/// A user's previous feedback counts as reliable when it agrees with their
/// next event: positive feedback followed by an item sharing a category, or
/// negative feedback followed by one that does not.
pub fn online_update(
    state: &mut TrainState,
    data: &Dataset,
    res: &Resources,
    cfg: &ExperimentConfig,
    histories: &mut [Vec<usize>],
    events: &[FeedbackEvent],
) -> Result<Vec<UpdateLog>> {
    if histories.len() != data.n_users() {
        return Err(Error::invalid("one history per user is required"));
    }
    let a = &cfg.adaptive;
    reset_momentum(state);
    let index = if cfg.context_k() > 0 {
        retrieval_index(data, res, &item_embeddings(&state.model, res, stack_options(cfg))?)?
    } else {
        Vec::new()
    };
    let mut last: Vec<Option<(usize, bool, FeedbackKind)>> = vec![None; data.n_users()];
    let mut logs = Vec::with_capacity(events.len());
    for (k, ev) in events.iter().enumerate() {
        let u = data
            .user_idx(&ev.user)
            .ok_or_else(|| Error::data(format!("event {}: unknown user {}", k + 1, ev.user)))?;
        let i = data
            .item_idx(&ev.item)
            .ok_or_else(|| Error::data(format!("event {}: unknown item {}", k + 1, ev.item)))?;
        if !ev.value.is_finite() || (ev.kind == FeedbackKind::Implicit && ev.value < 0.0) {
            return Err(Error::data(format!("event {}: invalid value {}", k + 1, ev.value)));
        }
        let explicit = ev.kind == FeedbackKind::Explicit;
        let positive = ev.positive(a.positive_rating);
        if let Some((prev, prev_positive, prev_kind)) = last[u] {
            let agreed = prev_positive == share_category(data, prev, i);
            state.reliability.observe(prev_kind == FeedbackKind::Explicit, agreed, a.reliability_decay);
        }
        last[u] = Some((i, positive, ev.kind));
        let (alpha, beta, _) = reliability_weights(state.reliability)?;

        let mut log = UpdateLog {
            event: k,
            user: ev.user.clone(),
            item: ev.item.clone(),
            kind: ev.kind,
            uncertainty: 0.0,
            eta: 0.0,
            alpha,
            beta,
            updated_fraction: 0.0,
            loss: 0.0,
            nll: 0.0,
            squared_error: None,
            ewc: 0.0,
            skipped: true,
        };
        if histories[u].is_empty() {
            histories[u].push(i);
            logs.push(log);
            continue;
        }
        let mut ex = Example {
            user: u,
            history: res.trim(&histories[u]).to_vec(),
            target: i,
            timestamp: ev.timestamp,
            rating: explicit.then_some(ev.value),
            group: data.users[u].group_label,
            weight: if explicit { 1.0 } else { ev.value },
            context: Vec::new(),
        };
        attach_context(std::slice::from_mut(&mut ex), &state.model, res, &index, cfg)?;
        let opts = LossOptions {
            nll_scale: beta,
            rating_scale: if explicit { alpha } else { 0.0 },
            lambda_fair: 0.0,
            ..loss_options(cfg, 1)
        };
        let out = batch_loss(&state.model, res, std::slice::from_ref(&ex), &opts, None, state.ewc.as_ref())?;
        let mut grads = out.grads;
        let combined = combined_feedback_loss(
            &out.squared_errors,
            &[ex.weight * out.nll[0]],
            alpha,
            beta,
            a.gamma_reg,
            &state.model,
            &mut grads,
        )?;
        clip(&mut grads, cfg.train.clip);

        let seen = &histories[u];
        let unseen: Vec<f64> = out.probs[0]
            .iter()
            .enumerate()
            .filter(|(j, _)| !seen.contains(j))
            .map(|(_, p)| *p)
            .collect();
        let z: f64 = unseen.iter().sum();
        let uncertainty = if z > 0.0 {
            normalized_entropy(&unseen.iter().map(|p| p / z).collect::<Vec<_>>())
        } else {
            1.0
        };
        let eta = adaptive_rate(a.eta0, a.uncertainty_decay, uncertainty)?;
        let outcome = selective_step(&mut state.model, &grads, &mut state.opt, a.momentum, eta, a.tau_sel)?;
        histories[u].push(i);

        log.uncertainty = uncertainty;
        log.eta = eta;
        log.loss = combined.value + out.ewc;
        log.nll = out.nll[0];
        log.squared_error = out.squared_errors.first().copied();
        log.ewc = out.ewc;
        if let StepOutcome::Applied { updated_fraction } = outcome {
            log.updated_fraction = updated_fraction;
            log.skipped = false;
        } else {
            log::warn!("event {}: rejected a non-finite gradient", k + 1);
        }
        logs.push(log);
    }
    Ok(logs)
}

/// Anchors the trained state, then streams the validation interactions
/// through [`online_update`] starting from training histories.
pub fn adapt_on_validation(state: &mut TrainState, data: &Dataset, res: &Resources, cfg: &ExperimentConfig) -> Result<Vec<UpdateLog>> {
    consolidate(state, data, cfg, res, cfg.adaptive.ewc_lambda)?;
    let mut histories = known_histories(data, false);
    online_update(state, data, res, cfg, &mut histories, &validation_feedback(data))
}

/// Offline training followed, when the adaptive flag is on, by the
/// validation stream.
pub fn fit(data: &Dataset, cfg: &ExperimentConfig) -> Result<(Trained, Vec<UpdateLog>)> {
    let mut trained = train(data, cfg)?;
    let mut logs = Vec::new();
    if cfg.flags.adaptive && trained.diverged.is_none() {
        let res = Resources::new(data, cfg)?;
        logs = adapt_on_validation(&mut trained.state, data, &res, cfg)?;
    }
    Ok((trained, logs))
}
