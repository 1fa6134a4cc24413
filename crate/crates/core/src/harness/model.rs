//! The full recommender: parameters, dataset-derived resources, and the
//! composed training loss with its gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adaptive::{ewc_penalty, EwcState};
use crate::dataset::Dataset;
use crate::debias::{adversary_loss, confusion_loss, Adversary, AdversaryInput, AdversaryObjective, PopularityStrata};
use crate::error::{Error, Result};
use crate::explain::{Aspects, ContextAttention, PreferenceHead};
use crate::generator::{self, DecoderInput, GeneratorParams, GeneratorShape};
use crate::multimodal::{ModalInput, MultimodalCache, MultimodalParams, StackOptions};
use crate::numerics::{softmax, ParamSet, Rng, Tensor};
use crate::retrieval::{build_index, retrieve_top_k, ContextEntry, IndexSource, RetrievalConfig};

use super::config::ExperimentConfig;

/// Explicit-rating head `r̂ = b + u·h + Σ_k w_k h[k] e_i[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingHead {
    /// Per-coordinate weights of the user-item interaction.
    pub w: Tensor,
    /// User-only term.
    pub u: Tensor,
    pub b: Tensor,
}
crate::impl_params!(RatingHead { w, u, b });

impl RatingHead {
    pub fn new(d: usize) -> Self {
        RatingHead {
            w: Tensor::vector(vec![1.0; d]),
            u: Tensor::zeros(&[d]),
            b: Tensor::vector(vec![3.0]),
        }
    }

    pub fn predict(&self, h: &[f64], e: &[f64]) -> f64 {
        let w = self.w.data();
        let u = self.u.data();
        self.b.data()[0] + (0..h.len()).map(|k| h[k] * (u[k] + w[k] * e[k])).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub multimodal: MultimodalParams,
    pub generator: GeneratorParams,
    pub rating: RatingHead,
    /// Additive logit offset per popularity stratum.
    pub strata_bias: Tensor,
    pub preference: PreferenceHead,
    pub context: ContextAttention,
}
crate::impl_params!(ModelParams { multimodal, generator, rating, strata_bias, preference, context });

/// Every size a model depends on, so a checkpoint can be rebuilt without
/// the dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_items: usize,
    pub vocab: usize,
    pub n_categories: usize,
    pub numeric_dim: usize,
    pub n_groups: usize,
    pub strata: usize,
    pub aspects: usize,
    pub propensity_dim: usize,
    pub d: usize,
    pub dk: usize,
    pub blocks: usize,
    pub max_tokens: usize,
    pub max_len: usize,
}

impl ModelShape {
    pub fn new(data: &Dataset, cfg: &ExperimentConfig, res: &Resources) -> Self {
        let m = &cfg.model;
        ModelShape {
            n_items: data.n_items(),
            vocab: data.vocab.size(),
            n_categories: data.n_categories(),
            numeric_dim: data.numeric_dim,
            n_groups: data.groups.len(),
            strata: res.strata.len(),
            aspects: res.aspects.len(),
            propensity_dim: crate::debias::propensity_dim(data),
            d: m.d,
            dk: m.dk,
            blocks: m.blocks,
            max_tokens: m.max_tokens,
            max_len: m.max_history + cfg.context_k() + 2,
        }
    }
}

impl ModelParams {
    /// Each component draws from its own stream, so the initial values do not
    /// depend on which features are switched on.
    pub fn new(shape: &ModelShape, rng: &Rng) -> Result<Self> {
        let d = shape.d;
        let mut generator = GeneratorParams::new(
            GeneratorShape {
                n_items: shape.n_items,
                d,
                dk: shape.dk,
                d_in: d,
                blocks: shape.blocks,
                max_len: shape.max_len,
            },
            &mut rng.fork(2),
        )?;
        // Context tokens start as pure position rows.
        generator.ctx_proj.fill(0.0);
        Ok(ModelParams {
            multimodal: MultimodalParams::new(
                shape.vocab,
                shape.n_categories,
                shape.numeric_dim,
                d,
                shape.dk,
                shape.max_tokens,
                &mut rng.fork(1),
            ),
            generator,
            rating: RatingHead::new(d),
            strata_bias: Tensor::zeros(&[shape.strata]),
            preference: PreferenceHead::new(d, shape.aspects.max(2), &mut rng.fork(3))?,
            context: ContextAttention::new(d, shape.dk, &mut rng.fork(4)),
        })
    }
}

/// Dataset-derived tables the model reads but never learns.
#[derive(Clone, Debug)]
pub struct Resources {
    pub item_inputs: Vec<ModalInput>,
    pub strata: PopularityStrata,
    pub item_strata: Vec<usize>,
    pub aspects: Aspects,
    /// Latest training interaction per item, 0 if none.
    pub item_times: Vec<i64>,
    pub popularity: Vec<usize>,
    /// Share of training cases per group, the `P(S = s)` of the fairness
    /// objective.
    pub group_prior: Vec<f64>,
    pub max_tokens: usize,
    pub user_descriptions: usize,
    pub max_history: usize,
}

fn group_prior(data: &Dataset) -> Vec<f64> {
    let g = data.groups.len().max(1);
    let mut counts = vec![0.0; g];
    for (u, user) in data.users.iter().enumerate() {
        counts[user.group_label.min(g - 1)] += data.train_events(u).len().saturating_sub(1) as f64;
    }
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        counts.iter().map(|c| c / total).collect()
    } else {
        vec![1.0 / g as f64; g]
    }
}

impl Resources {
    pub fn new(data: &Dataset, cfg: &ExperimentConfig) -> Result<Self> {
        if data.n_items() == 0 {
            return Err(Error::data("dataset has no items"));
        }
        let max_tokens = cfg.model.max_tokens;
        let item_inputs = data
            .items
            .iter()
            .map(|it| ModalInput {
                tokens: it.description_tokens.iter().take(max_tokens).copied().collect(),
                categories: it.categories.clone(),
                numeric: it.numeric_features.clone(),
            })
            .collect();
        let popularity = data.item_popularity();
        let strata = PopularityStrata::from_counts(&popularity, cfg.debias.strata)?;
        let item_strata = strata.assign(&popularity);
        let mut cat_freq = vec![0usize; data.n_categories()];
        for &i in &data.split.train {
            for &c in &data.items[data.events[i].item].categories {
                cat_freq[c] += 1;
            }
        }
        let item_cats: Vec<Vec<usize>> = data.items.iter().map(|i| i.categories.clone()).collect();
        let aspects = if data.n_categories() >= 2 {
            Aspects::top(&cat_freq, &data.categories, &item_cats, cfg.explain.aspects)?
        } else {
            Aspects {
                categories: Vec::new(),
                names: Vec::new(),
                members: Vec::new(),
            }
        };
        let mut item_times = vec![0i64; data.n_items()];
        for &i in &data.split.train {
            let e = &data.events[i];
            item_times[e.item] = item_times[e.item].max(e.timestamp);
        }
        Ok(Resources {
            item_inputs,
            strata,
            item_strata,
            aspects,
            item_times,
            popularity,
            group_prior: group_prior(data),
            max_tokens,
            user_descriptions: cfg.model.user_descriptions,
            max_history: cfg.model.max_history,
        })
    }

    /// User-side features from a history: the latest descriptions as text,
    /// the category multiset and the mean numeric vector.
    pub fn user_input(&self, history: &[usize]) -> ModalInput {
        let mut tokens = Vec::new();
        let start = history.len().saturating_sub(self.user_descriptions);
        for &i in &history[start..] {
            tokens.extend_from_slice(&self.item_inputs[i].tokens);
        }
        if tokens.len() > self.max_tokens {
            tokens.drain(..tokens.len() - self.max_tokens);
        }
        let mut categories = Vec::new();
        for &i in history {
            categories.extend_from_slice(&self.item_inputs[i].categories);
        }
        let dim = self.item_inputs.first().map_or(0, |x| x.numeric.len());
        let mut numeric = vec![0.0; dim];
        if dim > 0 && !history.is_empty() {
            for &i in history {
                for (o, v) in numeric.iter_mut().zip(&self.item_inputs[i].numeric) {
                    *o += v;
                }
            }
            numeric.iter_mut().for_each(|v| *v /= history.len() as f64);
        }
        ModalInput {
            tokens,
            categories,
            numeric,
        }
    }

    /// The most recent `max_history` items.
    pub fn trim<'a>(&self, history: &'a [usize]) -> &'a [usize] {
        &history[history.len().saturating_sub(self.max_history)..]
    }
}

pub fn stack_options(cfg: &ExperimentConfig) -> StackOptions {
    StackOptions {
        fusion: cfg.flags.fusion,
        cross_modal: cfg.flags.fusion,
    }
}

pub fn item_embeddings(model: &ModelParams, res: &Resources, opts: StackOptions) -> Result<Vec<Vec<f64>>> {
    res.item_inputs
        .iter()
        .map(|x| Ok(model.multimodal.forward(x, opts)?.fused))
        .collect()
}

pub fn user_embedding(model: &ModelParams, res: &Resources, history: &[usize], opts: StackOptions) -> Result<Vec<f64>> {
    Ok(model.multimodal.forward(&res.user_input(history), opts)?.fused)
}

/// Retrieval index over the current item embeddings plus category centroids.
pub fn retrieval_index(data: &Dataset, res: &Resources, embeddings: &[Vec<f64>]) -> Result<Vec<ContextEntry>> {
    let sources: Vec<IndexSource> = data
        .items
        .iter()
        .enumerate()
        .map(|(i, it)| IndexSource {
            item_id: &it.item_id,
            description: &it.description,
            categories: &it.categories,
            embedding: embeddings[i].clone(),
            timestamp: res.item_times[i],
            review_count: res.popularity[i],
        })
        .collect();
    build_index(&sources, &data.categories)
}

/// Retrieved context embeddings for a history at time `t_current`.
pub fn retrieve_context(
    model: &ModelParams,
    res: &Resources,
    index: &[ContextEntry],
    history: &[usize],
    t_current: i64,
    opts: StackOptions,
    cfg: &RetrievalConfig,
) -> Result<Vec<Vec<f64>>> {
    if cfg.k == 0 {
        return Ok(Vec::new());
    }
    let q = user_embedding(model, res, history, opts)?;
    Ok(retrieve_top_k(&q, t_current, index, cfg)?
        .entries
        .into_iter()
        .map(|s| s.entry.embedding)
        .collect())
}

/// One next-item training case with its retrieved context already attached.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub user: usize,
    pub history: Vec<usize>,
    pub target: usize,
    pub timestamp: i64,
    pub rating: Option<f64>,
    pub group: usize,
    /// Importance weight on the NLL term.
    pub weight: f64,
    pub context: Vec<Vec<f64>>,
}

/// How the terms of the composed loss are weighted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub stack: StackOptions,
    /// Multiplies every example's NLL term.
    pub nll_scale: f64,
    /// Multiplies every explicit example's squared rating error.
    pub rating_scale: f64,
    pub strata_bias: bool,
    pub lambda_fair: f64,
    pub adversary_input: AdversaryInput,
    pub objective: AdversaryObjective,
    /// Reversal objective only: the adversary term enters the model's
    /// objective as `-reversal·λ_fair·L_adv`.
    pub reversal: f64,
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// `Σ_k nll_scale·w_k·nll_k + rating terms + fairness term + EWC`, where
    /// the fairness term is `λ_fair·L_conf` or `-reversal·λ_fair·L_adv`.
    pub value: f64,
    pub nll: Vec<f64>,
    pub squared_errors: Vec<f64>,
    /// The adversary's own label cross-entropy.
    pub adversary_loss: Option<f64>,
    pub ewc: f64,
    pub grads: ModelParams,
    pub adversary_grads: Option<Adversary>,
    /// Unmasked next-item distribution per example.
    pub probs: Vec<Vec<f64>>,
    pub predicted_ratings: Vec<f64>,
    pub h_users: Vec<Vec<f64>>,
}

struct Forward {
    user: MultimodalCache,
    decoder: generator::DecoderCache,
    probs: Vec<f64>,
    content: Tensor,
}

fn strata_logits(logits: &mut [f64], model: &ModelParams, res: &Resources) {
    let b = model.strata_bias.data();
    for (l, &s) in logits.iter_mut().zip(&res.item_strata) {
        *l += b[s];
    }
}

/// Composed loss over a batch and its gradient with respect to every model
/// parameter. Adversary parameters are read, and their own gradient is
/// returned separately.
pub fn batch_loss(
    model: &ModelParams,
    res: &Resources,
    batch: &[Example],
    opts: &LossOptions,
    adversary: Option<&Adversary>,
    ewc: Option<&EwcState<ModelParams>>,
) -> Result<BatchOutput> {
    let mut grads = model.zeroed();
    let mut item_caches: BTreeMap<usize, MultimodalCache> = BTreeMap::new();
    for ex in batch {
        for &i in &ex.history {
            if let std::collections::btree_map::Entry::Vacant(slot) = item_caches.entry(i) {
                slot.insert(model.multimodal.forward(&res.item_inputs[i], opts.stack)?);
            }
        }
    }
    let d = model.generator.dim();

    let mut fwd = Vec::with_capacity(batch.len());
    let mut nll = Vec::with_capacity(batch.len());
    for ex in batch {
        let user = model.multimodal.forward(&res.user_input(&ex.history), opts.stack)?;
        let rows: Vec<Vec<f64>> = ex.history.iter().map(|i| item_caches[i].fused.clone()).collect();
        let content = Tensor::from_rows(&rows, d)?;
        let input = DecoderInput {
            h_user: &user.fused,
            context: &ex.context,
            history: &ex.history,
            content: Some(&content),
        };
        let mut decoder = generator::forward(&input, &model.generator)?;
        if opts.strata_bias {
            strata_logits(&mut decoder.logits, model, res);
        }
        let probs = softmax(&decoder.logits).map_err(|_| Error::Numerical("logits not finite".into()))?;
        nll.push(-probs[ex.target].max(f64::MIN_POSITIVE).ln());
        fwd.push(Forward {
            user,
            decoder,
            probs,
            content,
        });
    }

    // Adversary reads the model's score (or representation) per example.
    let mut adversary_value = None;
    let mut adversary_grads = None;
    let mut d_adv: Vec<Vec<f64>> = Vec::new();
    let (mut fair_value, mut fair_coef) = (0.0, 0.0);
    if let (Some(adv), true) = (adversary, opts.lambda_fair > 0.0) {
        let inputs: Vec<Vec<f64>> = fwd
            .iter()
            .zip(batch)
            .map(|(f, ex)| match opts.adversary_input {
                AdversaryInput::Rating => vec![model.rating.predict(f.decoder.last_hidden(), model.generator.item_emb.row(ex.target))],
                AdversaryInput::Score => vec![f.decoder.logits[ex.target]],
                AdversaryInput::Representation => f.decoder.last_hidden().to_vec(),
            })
            .collect();
        let groups: Vec<usize> = batch.iter().map(|e| e.group).collect();
        let mut present = vec![false; adv.groups()];
        for &g in &groups {
            if g < present.len() {
                present[g] = true;
            }
        }
        if present.iter().all(|p| *p) {
            let mut ag = adv.zeroed();
            let out = adversary_loss(&inputs, &groups, adv, 1.0, &mut ag)?;
            adversary_value = Some(out.loss);
            adversary_grads = Some(ag);
            match opts.objective {
                AdversaryObjective::Reversal => {
                    fair_value = out.loss;
                    fair_coef = -opts.reversal * opts.lambda_fair;
                    d_adv = out.d_inputs;
                }
                AdversaryObjective::Confusion => {
                    let (v, d) = confusion_loss(&inputs, adv, &res.group_prior)?;
                    fair_value = v;
                    fair_coef = opts.lambda_fair;
                    d_adv = d;
                }
            }
        }
    }

    let mut value = 0.0;
    let mut squared_errors = Vec::new();
    let mut predicted_ratings = Vec::with_capacity(batch.len());
    let mut d_items: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut h_users = Vec::with_capacity(batch.len());
    for (k, (ex, f)) in batch.iter().zip(&fwd).enumerate() {
        let c = opts.nll_scale * ex.weight;
        value += c * nll[k];
        // d(−log p_t)/dz = p − e_t.
        let mut d_logits: Vec<f64> = f.probs.iter().map(|p| c * p).collect();
        d_logits[ex.target] -= c;
        let mut d_last = vec![0.0; d];
        // dL/dr̂ from the rating loss and a rating-reading adversary.
        let mut dr = 0.0;
        if let Some(da) = d_adv.get(k) {
            match opts.adversary_input {
                AdversaryInput::Rating => dr += fair_coef * da[0],
                AdversaryInput::Score => d_logits[ex.target] += fair_coef * da[0],
                AdversaryInput::Representation => {
                    for (o, v) in d_last.iter_mut().zip(da) {
                        *o += fair_coef * v;
                    }
                }
            }
        }

        let h_t = f.decoder.last_hidden();
        let e_t = model.generator.item_emb.row(ex.target);
        let r_hat = model.rating.predict(h_t, e_t);
        predicted_ratings.push(r_hat);
        if let (Some(r), true) = (ex.rating, opts.rating_scale != 0.0) {
            let err = r_hat - r;
            squared_errors.push(err * err);
            value += opts.rating_scale * err * err;
            dr += 2.0 * opts.rating_scale * err;
        }
        if dr != 0.0 {
            let w = model.rating.w.data();
            let u = model.rating.u.data();
            grads.rating.b.data_mut()[0] += dr;
            for j in 0..d {
                grads.rating.w.data_mut()[j] += dr * h_t[j] * e_t[j];
                grads.rating.u.data_mut()[j] += dr * h_t[j];
                d_last[j] += dr * (u[j] + w[j] * e_t[j]);
            }
            let row = grads.generator.item_emb.row_mut(ex.target);
            for j in 0..d {
                row[j] += dr * w[j] * h_t[j];
            }
        }

        if opts.strata_bias {
            let gb = grads.strata_bias.data_mut();
            for (dl, &s) in d_logits.iter().zip(&res.item_strata) {
                gb[s] += dl;
            }
        }
        let input = DecoderInput {
            h_user: &f.user.fused,
            context: &ex.context,
            history: &ex.history,
            content: Some(&f.content),
        };
        let has_extra = d_last.iter().any(|v| *v != 0.0);
        let ig = generator::backward(
            &input,
            &f.decoder,
            &d_logits,
            has_extra.then_some(d_last.as_slice()),
            &model.generator,
            &mut grads.generator,
        )?;
        model.multimodal.backward(&f.user, &ig.h_user, &mut grads.multimodal)?;
        if let Some(dc) = ig.content {
            for (t, &i) in ex.history.iter().enumerate() {
                let acc = d_items.entry(i).or_insert_with(|| vec![0.0; d]);
                for (o, v) in acc.iter_mut().zip(dc.row(t)) {
                    *o += v;
                }
            }
        }
        h_users.push(f.user.fused.clone());
    }
    for (i, dv) in &d_items {
        model.multimodal.backward(&item_caches[i], dv, &mut grads.multimodal)?;
    }
    value += fair_coef * fair_value;
    let ewc_value = match ewc {
        Some(e) => ewc_penalty(model, e, Some(&mut grads))?,
        None => 0.0,
    };
    value += ewc_value;
    Ok(BatchOutput {
        value,
        nll,
        squared_errors,
        adversary_loss: adversary_value,
        ewc: ewc_value,
        grads,
        adversary_grads,
        probs: fwd.into_iter().map(|f| f.probs).collect(),
        predicted_ratings,
        h_users,
    })
}

/// Scores for every catalog item after one history.
#[derive(Clone, Debug, PartialEq)]
pub struct NextItem {
    /// Ranking scores: raw logits, or backdoor-adjusted probabilities when
    /// the strata offsets are in use.
    pub scores: Vec<f64>,
    /// Training-time logits, strata offsets included when in use.
    pub logits: Vec<f64>,
    /// Decoder output at the last position.
    pub hidden: Vec<f64>,
    pub h_user: Vec<f64>,
}

impl NextItem {
    /// Predicted explicit rating of `item`.
    pub fn rating(&self, model: &ModelParams, item: usize) -> f64 {
        model.rating.predict(&self.hidden, model.generator.item_emb.row(item))
    }
}

pub fn next_item_scores(
    model: &ModelParams,
    res: &Resources,
    history: &[usize],
    context: &[Vec<f64>],
    opts: StackOptions,
    strata_bias: bool,
) -> Result<NextItem> {
    let h_user = user_embedding(model, res, history, opts)?;
    let rows: Vec<Vec<f64>> = history
        .iter()
        .map(|&i| Ok(model.multimodal.forward(&res.item_inputs[i], opts)?.fused))
        .collect::<Result<_>>()?;
    let content = Tensor::from_rows(&rows, model.generator.dim())?;
    let input = DecoderInput {
        h_user: &h_user,
        context,
        history,
        content: Some(&content),
    };
    let cache = generator::forward(&input, &model.generator)?;
    let hidden = cache.last_hidden().to_vec();
    if strata_bias {
        let scores = crate::debias::backdoor_scores(&cache.logits, &res.item_strata, &res.strata, model.strata_bias.data())?;
        let mut logits = cache.logits;
        strata_logits(&mut logits, model, res);
        Ok(NextItem {
            scores,
            logits,
            hidden,
            h_user,
        })
    } else {
        Ok(NextItem {
            scores: cache.logits.clone(),
            logits: cache.logits,
            hidden,
            h_user,
        })
    }
}
