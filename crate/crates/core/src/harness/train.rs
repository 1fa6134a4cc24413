//! Offline training.

use serde::{Deserialize, Serialize};

use crate::adaptive::{estimate_fisher, momentum_step, EwcState, OptimizerState, Reliability, StepOutcome};
use crate::dataset::Dataset;
use crate::debias::{fit_propensity, propensity_features, propensity_samples, Adversary, AdversaryInput, PropensityModel};
use crate::error::{Error, Result};
use crate::explain::preference_loss;
use crate::numerics::{ParamSet, Rng};
use crate::retrieval::ContextEntry;

use super::config::ExperimentConfig;
use super::model::{batch_loss, item_embeddings, retrieval_index, retrieve_context, stack_options, Example, LossOptions, ModelParams, ModelShape, Resources};

/// Everything a checkpoint carries besides the configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub shape: ModelShape,
    pub model: ModelParams,
    pub opt: OptimizerState<ModelParams>,
    pub adversary: Option<Adversary>,
    pub propensity: Option<PropensityModel>,
    pub ewc: Option<EwcState<ModelParams>>,
    /// Feedback reliability carried across online sessions.
    pub reliability: Reliability,
    /// Completed epochs.
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub loss: f64,
    pub nll: f64,
    pub adversary_loss: Option<f64>,
    pub rejected_steps: u64,
}

#[derive(Clone, Debug)]
pub struct Trained {
    /// Last state whose epoch finished with a finite loss.
    pub state: TrainState,
    pub log: Vec<EpochLog>,
    /// Set when training stopped on a non-finite loss.
    pub diverged: Option<String>,
}

/// Initial state: fresh parameters, adversary when groups allow one, and a
/// fitted propensity model when debiasing is on.
pub fn init_state(data: &Dataset, cfg: &ExperimentConfig, res: &Resources) -> Result<TrainState> {
    cfg.validate()?;
    let shape = ModelShape::new(data, cfg, res);
    let rng = Rng::new(cfg.seed);
    let model = ModelParams::new(&shape, &rng)?;
    let adversary = if cfg.flags.debias && shape.n_groups >= 2 {
        let width = match cfg.debias.fairness.adversary_input {
            AdversaryInput::Rating | AdversaryInput::Score => 1,
            AdversaryInput::Representation => shape.d,
        };
        Some(Adversary::new(width, shape.n_groups, &mut rng.fork(5))?)
    } else {
        None
    };
    let propensity = if cfg.flags.debias {
        let (pos, neg) = propensity_samples(data, cfg.debias.negatives, &mut rng.fork(6));
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::data("propensity fitting needs observed and unobserved pairs"));
        }
        let mut m = PropensityModel::new(shape.propensity_dim, cfg.debias.propensity_floor);
        fit_propensity(&pos, &neg, &mut m, cfg.debias.propensity_epochs, 1e-7)?;
        Some(m)
    } else {
        None
    };
    Ok(TrainState {
        opt: OptimizerState::new(&model),
        shape,
        model,
        adversary,
        propensity,
        ewc: None,
        reliability: Reliability::default(),
        epoch: 0,
    })
}

/// One case per training position after the first, with IPS weights
/// normalized to mean one when a propensity model is present.
pub fn training_examples(data: &Dataset, res: &Resources, propensity: Option<&PropensityModel>) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for u in 0..data.n_users() {
        let ev = data.train_events(u);
        let items: Vec<usize> = ev.iter().map(|&e| data.events[e].item).collect();
        for t in 1..ev.len() {
            let e = &data.events[ev[t]];
            out.push(Example {
                user: u,
                history: res.trim(&items[..t]).to_vec(),
                target: e.item,
                timestamp: e.timestamp,
                rating: e.rating,
                group: data.users[u].group_label,
                weight: 1.0,
                context: Vec::new(),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::data("no training examples: every user needs two training interactions"));
    }
    if let Some(p) = propensity {
        let mut inv = Vec::with_capacity(out.len());
        for ex in &out {
            inv.push(1.0 / p.estimate(&propensity_features(data, ex.user, ex.target))?);
        }
        let mean = inv.iter().sum::<f64>() / inv.len() as f64;
        for (ex, w) in out.iter_mut().zip(inv) {
            ex.weight = w / mean;
        }
    }
    Ok(out)
}

/// Fills each example's retrieved context for the current parameters.
pub fn attach_context(
    batch: &mut [Example],
    model: &ModelParams,
    res: &Resources,
    index: &[ContextEntry],
    cfg: &ExperimentConfig,
) -> Result<()> {
    if cfg.context_k() == 0 {
        return Ok(());
    }
    let opts = stack_options(cfg);
    for ex in batch.iter_mut() {
        ex.context = retrieve_context(model, res, index, &ex.history, ex.timestamp, opts, &cfg.retrieval)?;
    }
    Ok(())
}

pub fn loss_options(cfg: &ExperimentConfig, batch_len: usize) -> LossOptions {
    LossOptions {
        stack: stack_options(cfg),
        nll_scale: 1.0 / batch_len as f64,
        rating_scale: cfg.train.rating_weight / batch_len as f64,
        strata_bias: cfg.flags.debias,
        lambda_fair: cfg.lambda_fair(),
        adversary_input: cfg.debias.fairness.adversary_input,
        objective: cfg.debias.fairness.objective,
        reversal: cfg.debias.fairness.reversal,
    }
}

pub(crate) fn clip<P: ParamSet>(g: &mut P, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let n = g.tensors().iter().map(|t| t.sum_sq()).sum::<f64>().sqrt();
    if n > max_norm {
        let s = max_norm / n;
        for t in g.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

pub fn train(data: &Dataset, cfg: &ExperimentConfig) -> Result<Trained> {
    let res = Resources::new(data, cfg)?;
    let state = init_state(data, cfg, &res)?;
    train_from(state, data, cfg, &res, cfg.train.epochs)
}

/// Continues training `state` for `epochs` more epochs. An EWC anchor in the
/// state adds its penalty to every batch.
pub fn train_from(mut state: TrainState, data: &Dataset, cfg: &ExperimentConfig, res: &Resources, epochs: usize) -> Result<Trained> {
    let examples = training_examples(data, res, state.propensity.as_ref())?;
    let mut log = Vec::new();
    let rng = Rng::new(cfg.seed).fork(7);
    for phase_epoch in 0..epochs {
        let epoch = state.epoch;
        let lr = cfg.train.lr * cfg.train.lr_decay.powi(phase_epoch as i32);
        let last_good = state.clone();
        let index = if cfg.context_k() > 0 {
            retrieval_index(data, res, &item_embeddings(&state.model, res, stack_options(cfg))?)?
        } else {
            Vec::new()
        };
        let mut order: Vec<usize> = (0..examples.len()).collect();
        rng.fork(epoch).shuffle(&mut order);
        let (mut loss_sum, mut nll_sum, mut adv_sum, mut adv_batches, mut seen) = (0.0, 0.0, 0.0, 0usize, 0usize);
        let rejected_before = state.opt.rejected;
        let mut failure = None;
        for chunk in order.chunks(cfg.train.batch_size) {
            let mut batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            attach_context(&mut batch, &state.model, res, &index, cfg)?;
            let opts = loss_options(cfg, batch.len());
            let out = batch_loss(&state.model, res, &batch, &opts, state.adversary.as_ref(), state.ewc.as_ref());
            let mut out = match out {
                Ok(o) if o.value.is_finite() => o,
                Ok(o) => {
                    failure = Some(format!("loss became {} in epoch {}", o.value, epoch + 1));
                    break;
                }
                Err(Error::Numerical(m)) => {
                    failure = Some(format!("{m} in epoch {}", epoch + 1));
                    break;
                }
                Err(e) => return Err(e),
            };
            loss_sum += out.value * batch.len() as f64;
            nll_sum += out.nll.iter().sum::<f64>();
            seen += batch.len();
            if let (Some(adv), Some(ag), Some(l)) = (state.adversary.as_mut(), out.adversary_grads.as_ref(), out.adversary_loss) {
                adv.axpy(-cfg.train.adversary_lr, ag)?;
                adv_sum += l;
                adv_batches += 1;
            }
            if cfg.flags.explain && res.aspects.len() >= 2 {
                let mut pg = state.model.preference.zeroed();
                let scale = 1.0 / batch.len() as f64;
                for (ex, h) in batch.iter().zip(&out.h_users) {
                    let cats: Vec<&[usize]> = ex.history.iter().map(|&i| res.item_inputs[i].categories.as_slice()).collect();
                    if let Some(target) = res.aspects.histogram(&cats) {
                        preference_loss(h, &target, &state.model.preference, scale, &mut pg)?;
                    }
                }
                state.model.preference.axpy(-cfg.train.preference_lr, &pg)?;
            }
            if cfg.train.weight_decay > 0.0 {
                out.grads.axpy(cfg.train.weight_decay, &state.model)?;
            }
            clip(&mut out.grads, cfg.train.clip);
            if momentum_step(&mut state.model, &out.grads, &mut state.opt, cfg.train.momentum, lr)? == StepOutcome::Rejected {
                log::warn!("rejected a non-finite gradient in epoch {}", epoch + 1);
            }
        }
        if failure.is_none() && !state.model.all_finite() {
            failure = Some(format!("parameters became non-finite in epoch {}", epoch + 1));
        }
        if let Some(msg) = failure {
            return Ok(Trained {
                state: last_good,
                log,
                diverged: Some(msg),
            });
        }
        state.epoch += 1;
        let entry = EpochLog {
            epoch: state.epoch,
            loss: loss_sum / seen.max(1) as f64,
            nll: nll_sum / seen.max(1) as f64,
            adversary_loss: (adv_batches > 0).then(|| adv_sum / adv_batches as f64),
            rejected_steps: state.opt.rejected - rejected_before,
        };
        log::info!(
            "epoch {} loss {:.5} nll {:.5}{}",
            entry.epoch,
            entry.loss,
            entry.nll,
            entry.adversary_loss.map(|a| format!(" adversary {a:.5}")).unwrap_or_default()
        );
        log.push(entry);
    }
    Ok(Trained {
        state,
        log,
        diverged: None,
    })
}

/// Fisher diagonal from per-example NLL gradients on a seeded sample of
/// training cases.
pub fn fisher_diagonal(state: &TrainState, data: &Dataset, cfg: &ExperimentConfig, res: &Resources, samples: usize) -> Result<ModelParams> {
    let mut examples = training_examples(data, res, None)?;
    let mut rng = Rng::new(cfg.seed).fork(8);
    rng.shuffle(&mut examples);
    examples.truncate(samples.max(1));
    let index = if cfg.context_k() > 0 {
        retrieval_index(data, res, &item_embeddings(&state.model, res, stack_options(cfg))?)?
    } else {
        Vec::new()
    };
    attach_context(&mut examples, &state.model, res, &index, cfg)?;
    let opts = LossOptions {
        nll_scale: 1.0,
        rating_scale: 0.0,
        lambda_fair: 0.0,
        ..loss_options(cfg, 1)
    };
    estimate_fisher(&state.model, examples.len(), |k, g| {
        let out = batch_loss(&state.model, res, std::slice::from_ref(&examples[k]), &opts, None, None)?;
        *g = out.grads;
        Ok(())
    })
}

/// Anchors the current parameters with a fresh Fisher estimate.
pub fn consolidate(state: &mut TrainState, data: &Dataset, cfg: &ExperimentConfig, res: &Resources, lambda: f64) -> Result<()> {
    let fisher = fisher_diagonal(state, data, cfg, res, cfg.adaptive.fisher_samples)?;
    state.ewc = Some(EwcState {
        fisher,
        anchor: state.model.clone(),
        lambda,
    });
    Ok(())
}

/// Drops the momentum so a new phase starts from rest.
pub fn reset_momentum(state: &mut TrainState) {
    state.opt.v.fill(0.0);
}
