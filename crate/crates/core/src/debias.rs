//! Exposure and popularity debiasing plus group-parity tooling.
//!
//! * A logistic propensity model estimates how likely a user-item pair was
//!   observed at all; training losses are reweighted by its inverse.
//! * Items are bucketed into popularity strata. The generator learns one
//!   logit offset per stratum, and the backdoor-adjusted score averages the
//!   item's probability over all strata under a fixed prior instead of using
//!   its observed stratum.
//! * A linear adversary predicts the user's group from the model's score (or
//!   hidden state); its gradient enters the main model with reversed sign.
//! * The parity gap measures how much above-threshold rates differ by group.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numerics::tensor::{dot, outer_acc, vec_mat};
use crate::numerics::{sigmoid, softmax, Rng, Tensor};

pub const DEFAULT_PROPENSITY_FLOOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct PropensityModel {
    pub w: Tensor,
    pub b: Tensor,
    pub floor: f64,
}
crate::impl_params!(PropensityModel { w, b });

impl PropensityModel {
    pub fn new(dim: usize, floor: f64) -> Self {
        PropensityModel {
            w: Tensor::zeros(&[dim]),
            b: Tensor::zeros(&[1]),
            floor,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    fn linear(&self, x: &[f64]) -> f64 {
        dot(self.w.data(), x) + self.b.data()[0]
    }

    /// `max(ε_p, sigmoid(w·x + b))`.
    pub fn estimate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::shape("propensity feature width"));
        }
        Ok(sigmoid(self.linear(x)).max(self.floor))
    }
}

/// User profile, item numeric features and `ln(1 + popularity)`.
pub fn propensity_features(data: &Dataset, user: usize, item: usize) -> Vec<f64> {
    let mut x = data.users[user].profile_features.clone();
    x.extend_from_slice(&data.items[item].numeric_features);
    x.push((1.0 + data.items[item].popularity_count as f64).ln());
    x
}

pub fn propensity_dim(data: &Dataset) -> usize {
    data.profile_dim() + data.numeric_dim + 1
}

/// Observed training pairs and `negatives` uniformly drawn unobserved items
/// per positive.
pub fn propensity_samples(data: &Dataset, negatives: usize, rng: &mut Rng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let n_items = data.n_items();
    for u in 0..data.n_users() {
        let seen: std::collections::HashSet<usize> = data.users[u].history.iter().copied().collect();
        if seen.len() >= n_items {
            continue;
        }
        for &e in data.train_events(u) {
            pos.push(propensity_features(data, u, data.events[e].item));
            let mut drawn = 0;
            while drawn < negatives {
                let j = rng.index(n_items);
                if !seen.contains(&j) {
                    neg.push(propensity_features(data, u, j));
                    drawn += 1;
                }
            }
        }
    }
    (pos, neg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    /// Mean log-loss after each epoch, starting with the initial loss.
    pub losses: Vec<f64>,
    pub epochs: usize,
}

fn logistic_loss_and_grad(model: &PropensityModel, pos: &[Vec<f64>], neg: &[Vec<f64>]) -> (f64, Vec<f64>, f64) {
    let n = (pos.len() + neg.len()) as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; model.dim()];
    let mut gb = 0.0;
    for (set, y) in [(pos, 1.0), (neg, 0.0)] {
        for x in set {
            let z = model.linear(x);
            // log(1 + e^z) - y z, stably
            loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
            let r = sigmoid(z) - y;
            for (g, v) in gw.iter_mut().zip(x) {
                *g += r * v;
            }
            gb += r;
        }
    }
    gw.iter_mut().for_each(|g| *g /= n);
    (loss / n, gw, gb / n)
}

/// Full-batch gradient descent on the unclipped logistic log-loss. The step
/// halves whenever a move would raise the loss, so the recorded losses never
/// increase.
pub fn fit_propensity(
    pos: &[Vec<f64>],
    neg: &[Vec<f64>],
    model: &mut PropensityModel,
    max_epochs: usize,
    tolerance: f64,
) -> Result<PropensityFit> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::data("propensity fitting needs positive and negative examples"));
    }
    if pos.iter().chain(neg).any(|x| x.len() != model.dim()) {
        return Err(Error::shape("propensity feature width"));
    }
    let mut lr = 1.0;
    let (mut loss, mut gw, mut gb) = logistic_loss_and_grad(model, pos, neg);
    let mut losses = vec![loss];
    let mut epochs = 0;
    while epochs < max_epochs {
        epochs += 1;
        let mut accepted = false;
        while lr > 1e-12 {
            let mut trial = model.clone();
            for (w, g) in trial.w.data_mut().iter_mut().zip(&gw) {
                *w -= lr * g;
            }
            trial.b.data_mut()[0] -= lr * gb;
            let (l, tw, tb) = logistic_loss_and_grad(&trial, pos, neg);
            if l <= loss {
                *model = trial;
                let improvement = loss - l;
                loss = l;
                gw = tw;
                gb = tb;
                accepted = improvement > tolerance;
                lr *= 1.5;
                break;
            }
            lr *= 0.5;
        }
        losses.push(loss);
        if !accepted {
            break;
        }
    }
    Ok(PropensityFit { losses, epochs })
}

/// `Σ ℓ_k / e_k / population`. With `population` equal to the number of
/// samples this is the mean inverse-propensity-weighted loss.
pub fn ips_estimate(losses: &[f64], propensities: &[f64], population: usize) -> Result<f64> {
    if losses.len() != propensities.len() {
        return Err(Error::shape("losses and propensities differ in length"));
    }
    if population == 0 {
        return Err(Error::invalid("empty population"));
    }
    if propensities.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::invalid("propensities must be positive"));
    }
    Ok(losses.iter().zip(propensities).map(|(l, e)| l / e).sum::<f64>() / population as f64)
}

/// Mean IPS loss over a batch and its gradient with respect to each sample
/// loss, `1 / (n e_k)`.
pub fn ips_loss(losses: &[f64], propensities: &[f64]) -> Result<(f64, Vec<f64>)> {
    let value = ips_estimate(losses, propensities, losses.len())?;
    let n = losses.len() as f64;
    Ok((value, propensities.iter().map(|e| 1.0 / (n * e)).collect()))
}

/// Popularity buckets over training counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopularityStrata {
    /// Stratum `p` holds counts in `[lower[p], lower[p+1])`; counts below
    /// `lower[0]` fall in stratum 0.
    pub lower: Vec<usize>,
    /// Share of catalog items per stratum.
    pub priors: Vec<f64>,
}

impl PopularityStrata {
    /// Quantile buckets of the item counts. Duplicate boundaries collapse, so
    /// heavily tied counts may yield fewer than `n` strata.
    pub fn from_counts(counts: &[usize], n: usize) -> Result<Self> {
        if counts.is_empty() || n == 0 {
            return Err(Error::invalid("strata need items and at least one bucket"));
        }
        let mut sorted = counts.to_vec();
        sorted.sort_unstable();
        let mut lower = vec![sorted[0]];
        for q in 1..n {
            let b = sorted[q * sorted.len() / n];
            if b > *lower.last().expect("nonempty") {
                lower.push(b);
            }
        }
        let mut s = PopularityStrata {
            priors: vec![0.0; lower.len()],
            lower,
        };
        for &c in counts {
            let p = s.stratum(c);
            s.priors[p] += 1.0;
        }
        let total = counts.len() as f64;
        s.priors.iter_mut().for_each(|p| *p /= total);
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn stratum(&self, count: usize) -> usize {
        self.lower.partition_point(|&l| l <= count).saturating_sub(1)
    }

    pub fn assign(&self, counts: &[usize]) -> Vec<usize> {
        counts.iter().map(|&c| self.stratum(c)).collect()
    }
}

/// `Σ_p P(Y | x, p) P(p)`.
pub fn backdoor_adjusted_score(conditionals: &[f64], priors: &[f64]) -> Result<f64> {
    if conditionals.len() != priors.len() {
        return Err(Error::invalid(format!(
            "{} stratum estimates for {} strata",
            conditionals.len(),
            priors.len()
        )));
    }
    if conditionals.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("missing stratum estimate"));
    }
    Ok(conditionals.iter().zip(priors).map(|(c, p)| c * p).sum())
}

/// Per-item probability conditional on each stratum: item `i`'s own offset
/// is replaced by `bias[p]` while every other item keeps its observed
/// stratum's offset. Returns one row per item.
pub fn stratum_conditionals(logits: &[f64], item_strata: &[usize], bias: &[f64]) -> Result<Vec<Vec<f64>>> {
    if logits.len() != item_strata.len() {
        return Err(Error::shape("logits and strata differ in length"));
    }
    if item_strata.iter().any(|&s| s >= bias.len()) {
        return Err(Error::invalid("item stratum without a bias"));
    }
    let shifted: Vec<f64> = logits.iter().zip(item_strata).map(|(z, &s)| z + bias[s]).collect();
    let m = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        + bias.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - bias.iter().cloned().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = shifted.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(logits
        .iter()
        .zip(&exps)
        .map(|(l, own)| {
            bias.iter()
                .map(|b| {
                    let e = (l + b - m).exp();
                    e / (z - own + e)
                })
                .collect()
        })
        .collect())
}

/// Backdoor-adjusted probability of every item.
pub fn backdoor_scores(logits: &[f64], item_strata: &[usize], strata: &PopularityStrata, bias: &[f64]) -> Result<Vec<f64>> {
    if bias.len() != strata.len() {
        return Err(Error::invalid("one bias per stratum required"));
    }
    stratum_conditionals(logits, item_strata, bias)?
        .iter()
        .map(|c| backdoor_adjusted_score(c, &strata.priors))
        .collect()
}

/// What the adversary reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdversaryInput {
    /// The predicted explicit rating `r̂_ui` of the target item.
    #[default]
    Rating,
    /// The model's unnormalized score (logit) for the target item.
    Score,
    /// The decoder's last hidden row.
    Representation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adversary {
    /// `[input width × groups]`
    pub w: Tensor,
    pub b: Tensor,
}
crate::impl_params!(Adversary { w, b });

impl Adversary {
    pub fn new(input: usize, groups: usize, rng: &mut Rng) -> Result<Self> {
        if groups < 2 {
            return Err(Error::invalid("fairness needs at least two groups"));
        }
        Ok(Adversary {
            w: Tensor::uniform(&[input, groups], 0.1, rng),
            b: Tensor::zeros(&[groups]),
        })
    }

    pub fn groups(&self) -> usize {
        self.b.len()
    }

    /// Group posterior for one input.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = vec_mat(x, &self.w)?;
        for (o, b) in z.iter_mut().zip(self.b.data()) {
            *o += b;
        }
        softmax(&z)
    }
}

#[derive(Clone, Debug)]
pub struct AdversaryOutput {
    pub loss: f64,
    /// `dL/dx` per example, before any reversal.
    pub d_inputs: Vec<Vec<f64>>,
}

/// Cross-entropy of the adversary's group prediction averaged over the
/// batch, which equals `-Σ_s P(s) E[log P̂(s | x) | s]` under the batch's
/// empirical group frequencies. Gradients on the adversary's parameters are
/// accumulated into `g` scaled by `scale`.
pub fn adversary_loss(
    inputs: &[Vec<f64>],
    groups: &[usize],
    adv: &Adversary,
    scale: f64,
    g: &mut Adversary,
) -> Result<AdversaryOutput> {
    if inputs.len() != groups.len() {
        return Err(Error::shape("inputs and group labels differ in length"));
    }
    let n_groups = adv.groups();
    let mut present = vec![false; n_groups];
    for &s in groups {
        if s >= n_groups {
            return Err(Error::invalid(format!("group {s} outside adversary range")));
        }
        present[s] = true;
    }
    if present.iter().any(|p| !p) {
        return Err(Error::invalid("a group has no members in the batch"));
    }
    let n = inputs.len() as f64;
    let mut loss = 0.0;
    let mut d_inputs = Vec::with_capacity(inputs.len());
    for (x, &s) in inputs.iter().zip(groups) {
        let p = adv.predict(x)?;
        loss -= p[s].max(f64::MIN_POSITIVE).ln();
        let mut dz = p;
        dz[s] -= 1.0;
        dz.iter_mut().for_each(|v| *v /= n);
        let scaled: Vec<f64> = dz.iter().map(|v| v * scale).collect();
        outer_acc(&mut g.w, x, &scaled)?;
        for (o, v) in g.b.data_mut().iter_mut().zip(&scaled) {
            *o += v;
        }
        d_inputs.push(crate::numerics::tensor::mat_vec(&adv.w, &dz)?);
    }
    Ok(AdversaryOutput {
        loss: loss / n,
        d_inputs,
    })
}

/// Prior-weighted cross-entropy `-Σ_s P(s) log P̂(s | x)` averaged over the
/// batch. It is smallest when every prediction equals the prior, so a model
/// minimizing it hides group information from the adversary. Returns the
/// value and `dL/dx` per example.
pub fn confusion_loss(inputs: &[Vec<f64>], adv: &Adversary, prior: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
    if prior.len() != adv.groups() {
        return Err(Error::shape("prior and adversary disagree on group count"));
    }
    if inputs.is_empty() {
        return Err(Error::invalid("confusion loss over an empty batch"));
    }
    let n = inputs.len() as f64;
    let mut loss = 0.0;
    let mut d_inputs = Vec::with_capacity(inputs.len());
    for x in inputs {
        let p = adv.predict(x)?;
        loss -= prior.iter().zip(&p).map(|(q, pi)| q * pi.max(f64::MIN_POSITIVE).ln()).sum::<f64>();
        let total: f64 = prior.iter().sum();
        let dz: Vec<f64> = p.iter().zip(prior).map(|(pi, q)| (total * pi - q) / n).collect();
        d_inputs.push(crate::numerics::tensor::mat_vec(&adv.w, &dz)?);
    }
    Ok((loss / n, d_inputs))
}

/// How the main model opposes the adversary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdversaryObjective {
    /// Minimize the prior-weighted cross-entropy of the adversary's
    /// prediction.
    #[default]
    Confusion,
    /// Ascend the adversary's label cross-entropy through a reversed
    /// gradient.
    Reversal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FairnessConfig {
    pub lambda_fair: f64,
    pub adversary_input: AdversaryInput,
    pub objective: AdversaryObjective,
    /// Reversal coefficient applied to the adversary gradient in the main
    /// update.
    pub reversal: f64,
    /// Score threshold; `None` uses the pooled median.
    pub tau: Option<f64>,
    pub epsilon: f64,
}

impl Default for FairnessConfig {
    fn default() -> Self {
        FairnessConfig {
            lambda_fair: 0.0,
            adversary_input: AdversaryInput::Rating,
            objective: AdversaryObjective::Confusion,
            reversal: 1.0,
            tau: None,
            epsilon: 0.05,
        }
    }
}

/// Fraction of scores strictly above `tau`.
pub fn positive_rate(scores: &[f64], tau: f64) -> f64 {
    scores.iter().filter(|s| **s > tau).count() as f64 / scores.len() as f64
}

/// Largest pairwise difference of above-threshold rates across groups.
pub fn parity_gap(scores_by_group: &[Vec<f64>], tau: f64) -> Result<f64> {
    if scores_by_group.iter().any(|g| g.is_empty()) {
        return Err(Error::invalid("every group needs at least one score"));
    }
    let rates: Vec<f64> = scores_by_group.iter().map(|g| positive_rate(g, tau)).collect();
    let hi = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(if rates.is_empty() { 0.0 } else { hi - lo })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub groups: Vec<String>,
    pub positive_rates: Vec<f64>,
    pub gap: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub within_tolerance: bool,
}

/// Parity report; `tau = None` uses the median of all scores.
pub fn fairness_report(names: &[String], scores_by_group: &[Vec<f64>], tau: Option<f64>, epsilon: f64) -> Result<FairnessReport> {
    if names.len() != scores_by_group.len() {
        return Err(Error::shape("group names and score sets differ in count"));
    }
    let all: Vec<f64> = scores_by_group.iter().flatten().copied().collect();
    let tau = match tau {
        Some(t) => t,
        None => median(&all).ok_or_else(|| Error::invalid("no scores"))?,
    };
    let gap = parity_gap(scores_by_group, tau)?;
    Ok(FairnessReport {
        groups: names.to_vec(),
        positive_rates: scores_by_group.iter().map(|g| positive_rate(g, tau)).collect(),
        gap,
        tau,
        epsilon,
        within_tolerance: gap <= epsilon,
    })
}
