//! Online adaptation: momentum updates with an uncertainty-scaled rate,
//! importance-sampled selective updates, reliability-weighted explicit and
//! implicit feedback, and elastic weight consolidation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_unchecked, ParamSet, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveConfig {
    /// Momentum coefficient `γ_m`.
    pub momentum: f64,
    /// Base rate `η0`.
    pub eta0: f64,
    /// Uncertainty decay `λ_u`.
    pub uncertainty_decay: f64,
    /// Selective-update threshold `τ_sel`; zero updates every coordinate.
    pub tau_sel: f64,
    /// L2 weight `γ_reg` of the combined feedback loss.
    pub gamma_reg: f64,
    /// Decay of the reliability moving averages.
    pub reliability_decay: f64,
    /// EWC strength `λ_ewc`.
    pub ewc_lambda: f64,
    /// Examples drawn for the Fisher estimate.
    pub fisher_samples: usize,
    /// Explicit ratings at or above this count as positive feedback.
    pub positive_rating: f64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            momentum: 0.9,
            eta0: 0.01,
            uncertainty_decay: 1.0,
            tau_sel: 1e-4,
            gamma_reg: 1e-5,
            reliability_decay: 0.99,
            ewc_lambda: 10.0,
            fisher_samples: 200,
            positive_rating: 4.0,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.eta0 > 0.0) {
            return Err(Error::invalid("base rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.tau_sel) {
            return Err(Error::invalid("selective threshold must lie in [0, 1)"));
        }
        if self.uncertainty_decay < 0.0 || self.gamma_reg < 0.0 || self.ewc_lambda < 0.0 {
            return Err(Error::invalid("decay and regularization weights must be nonnegative"));
        }
        if self.fisher_samples == 0 {
            return Err(Error::invalid("Fisher estimate needs at least one sample"));
        }
        if !(0.0..1.0).contains(&self.reliability_decay) {
            return Err(Error::invalid("reliability decay must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Momentum buffers shaped like the parameters they update.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<P> {
    pub v: P,
    pub step: u64,
    pub rejected: u64,
}

impl<P: ParamSet + Clone> OptimizerState<P> {
    pub fn new(params: &P) -> Self {
        OptimizerState {
            v: params.zeroed(),
            step: 0,
            rejected: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StepOutcome {
    /// Fraction of coordinates that moved.
    Applied { updated_fraction: f64 },
    /// The gradient was not finite; nothing changed except the rejection
    /// counter.
    Rejected,
}

fn check_layout<P: ParamSet>(params: &P, grads: &P, state: &OptimizerState<P>) -> Result<()> {
    let n = params.num_params();
    if grads.num_params() != n || state.v.num_params() != n {
        return Err(Error::shape("parameters, gradients and momentum differ in size"));
    }
    Ok(())
}

/// `v ← γ v + η g`, `θ ← θ − v`.
pub fn momentum_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState<P>,
    momentum: f64,
    eta: f64,
) -> Result<StepOutcome> {
    check_layout(params, grads, state)?;
    if !grads.all_finite() {
        state.rejected += 1;
        return Ok(StepOutcome::Rejected);
    }
    for ((t, g), v) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(state.v.tensors_mut()) {
        for ((x, gj), vj) in t.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vj = momentum * *vj + eta * gj;
            *x -= *vj;
        }
    }
    state.step += 1;
    Ok(StepOutcome::Applied { updated_fraction: 1.0 })
}

/// `η0 · exp(−λ_u · u)`.
pub fn adaptive_rate(eta0: f64, uncertainty_decay: f64, uncertainty: f64) -> Result<f64> {
    if !(uncertainty >= 0.0) {
        return Err(Error::invalid("uncertainty must be nonnegative"));
    }
    Ok(eta0 * (-uncertainty_decay * uncertainty).exp())
}

/// Entropy of `p` divided by `ln n`, in `[0, 1]`.
pub fn normalized_entropy(p: &[f64]) -> f64 {
    if p.len() < 2 {
        return 0.0;
    }
    let h: f64 = p.iter().filter(|q| **q > 0.0).map(|q| -q * q.ln()).sum();
    (h / (p.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Softmax over `|g_j|`; non-finite entries get probability zero.
pub fn update_probabilities(g: &[f64]) -> Result<Vec<f64>> {
    if !g.iter().any(|v| v.is_finite()) {
        return Err(Error::invalid("no finite gradient entries"));
    }
    let abs: Vec<f64> = g
        .iter()
        .map(|v| if v.is_finite() { v.abs() } else { f64::NEG_INFINITY })
        .collect();
    Ok(softmax_unchecked(&abs))
}

/// Momentum step restricted, tensor by tensor, to coordinates whose update
/// probability exceeds `tau_sel`. Frozen coordinates keep both their value
/// and their momentum. `tau_sel = 0` is exactly [`momentum_step`].
pub fn selective_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState<P>,
    momentum: f64,
    eta: f64,
    tau_sel: f64,
) -> Result<StepOutcome> {
    if tau_sel <= 0.0 {
        return momentum_step(params, grads, state, momentum, eta);
    }
    check_layout(params, grads, state)?;
    if !grads.all_finite() {
        state.rejected += 1;
        return Ok(StepOutcome::Rejected);
    }
    let total = params.num_params().max(1);
    let mut updated = 0usize;
    for ((t, g), v) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(state.v.tensors_mut()) {
        if g.is_empty() {
            continue;
        }
        let probs = update_probabilities(g.data())?;
        for (((x, gj), vj), pj) in t.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()).zip(&probs) {
            if *pj > tau_sel {
                *vj = momentum * *vj + eta * gj;
                *x -= *vj;
                updated += 1;
            }
        }
    }
    state.step += 1;
    Ok(StepOutcome::Applied {
        updated_fraction: updated as f64 / total as f64,
    })
}

/// Exponential moving averages of how often each feedback kind agreed with
/// later behavior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    pub explicit: f64,
    pub implicit: f64,
}

impl Default for Reliability {
    fn default() -> Self {
        Reliability {
            explicit: 0.5,
            implicit: 0.5,
        }
    }
}

impl Reliability {
    pub fn observe(&mut self, explicit: bool, agreed: bool, decay: f64) {
        let slot = if explicit { &mut self.explicit } else { &mut self.implicit };
        *slot = decay * *slot + (1.0 - decay) * if agreed { 1.0 } else { 0.0 };
    }
}

/// `(α, β, flagged)` with `α = rel_exp / (rel_exp + rel_imp)` and
/// `β = 1 − α`. Both reliabilities zero gives `α = 0.5`, flagged.
pub fn reliability_weights(rel: Reliability) -> Result<(f64, f64, bool)> {
    if rel.explicit < 0.0 || rel.implicit < 0.0 || !rel.explicit.is_finite() || !rel.implicit.is_finite() {
        return Err(Error::invalid("reliabilities must be finite and nonnegative"));
    }
    let s = rel.explicit + rel.implicit;
    if s == 0.0 {
        return Ok((0.5, 0.5, true));
    }
    let a = rel.explicit / s;
    Ok((a, 1.0 - a, false))
}

/// Value of the combined feedback loss and the gradient multiplier for each
/// per-sample term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    /// `dL/d(se_k)` for every explicit sample.
    pub explicit_scale: f64,
    /// `dL/d(nll_k)` for every implicit sample.
    pub implicit_scale: f64,
}

/// `α · mean(se) + β · mean(nll) + γ_reg · ½‖θ‖²`. The L2 gradient
/// `γ_reg θ` is accumulated into `grads`; the per-sample scales are returned
/// for the caller's backward passes.
pub fn combined_feedback_loss<P: ParamSet>(
    squared_errors: &[f64],
    nll: &[f64],
    alpha: f64,
    beta: f64,
    gamma_reg: f64,
    params: &P,
    grads: &mut P,
) -> Result<CombinedLoss> {
    if squared_errors.is_empty() && nll.is_empty() {
        return Err(Error::invalid("feedback batch has neither explicit nor implicit events"));
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let scale = |n: usize, w: f64| if n == 0 { 0.0 } else { w / n as f64 };
    let mut value = alpha * mean(squared_errors) + beta * mean(nll);
    if gamma_reg != 0.0 {
        let mut sq = 0.0;
        for (t, g) in params.tensors().into_iter().zip(grads.tensors_mut()) {
            sq += t.sum_sq();
            g.axpy(gamma_reg, t)?;
        }
        value += 0.5 * gamma_reg * sq;
    }
    Ok(CombinedLoss {
        value,
        explicit_scale: scale(squared_errors.len(), alpha),
        implicit_scale: scale(nll.len(), beta),
    })
}

/// Fisher diagonal and anchor for one consolidated task.
#[derive(Clone, Debug, PartialEq)]
pub struct EwcState<P> {
    pub fisher: P,
    pub anchor: P,
    pub lambda: f64,
}

/// `(λ/2) Σ F_j (θ_j − θ*_j)²`; the gradient `λ F_j (θ_j − θ*_j)` is
/// accumulated into `grads` when given.
pub fn ewc_penalty<P: ParamSet>(params: &P, ewc: &EwcState<P>, grads: Option<&mut P>) -> Result<f64> {
    let n = params.num_params();
    if ewc.fisher.num_params() != n || ewc.anchor.num_params() != n {
        return Err(Error::shape("EWC state does not match the parameters"));
    }
    let mut total = 0.0;
    let mut grad_tensors: Option<Vec<&mut Tensor>> = grads.map(|g| g.tensors_mut());
    for (k, ((t, f), a)) in params
        .tensors()
        .into_iter()
        .zip(ewc.fisher.tensors())
        .zip(ewc.anchor.tensors())
        .enumerate()
    {
        for (j, ((x, fj), aj)) in t.data().iter().zip(f.data()).zip(a.data()).enumerate() {
            let diff = x - aj;
            total += fj * diff * diff;
            if let Some(gs) = grad_tensors.as_mut() {
                gs[k].data_mut()[j] += ewc.lambda * fj * diff;
            }
        }
    }
    Ok(0.5 * ewc.lambda * total)
}

/// Mean of squared per-example gradients. `example_grad(k, g)` must write
/// the gradient of example `k` into the zeroed `g`.
pub fn estimate_fisher<P, F>(params: &P, n: usize, mut example_grad: F) -> Result<P>
where
    P: ParamSet + Clone,
    F: FnMut(usize, &mut P) -> Result<()>,
{
    if n == 0 {
        return Err(Error::invalid("Fisher estimate needs at least one example"));
    }
    let mut fisher = params.zeroed();
    let mut g = params.zeroed();
    for k in 0..n {
        g.fill(0.0);
        example_grad(k, &mut g)?;
        for (f, gt) in fisher.tensors_mut().into_iter().zip(g.tensors()) {
            for (fj, gj) in f.data_mut().iter_mut().zip(gt.data()) {
                *fj += gj * gj;
            }
        }
    }
    let inv = 1.0 / n as f64;
    for f in fisher.tensors_mut() {
        f.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok(fisher)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error, softmax, Rng};
    use proptest::prelude::*;

    #[derive(Clone, Debug, PartialEq)]
    struct P {
        a: Tensor,
        b: Tensor,
    }
    crate::impl_params!(P { a, b });

    fn p(a: Vec<f64>, b: Vec<f64>) -> P {
        P {
            a: Tensor::vector(a),
            b: Tensor::vector(b),
        }
    }

    #[test]
    fn zero_momentum_is_sgd() {
        let mut x = p(vec![1.0, 2.0], vec![3.0]);
        let g = p(vec![0.5, -1.0], vec![2.0]);
        let mut s = OptimizerState::new(&x);
        momentum_step(&mut x, &g, &mut s, 0.0, 0.1).unwrap();
        assert_eq!(x, p(vec![1.0 - 0.05, 2.0 + 0.1], vec![3.0 - 0.2]));
    }

    #[test]
    fn zero_gradient_twice_is_noop() {
        let x0 = p(vec![1.0], vec![-1.0]);
        let mut x = x0.clone();
        let g = x.zeroed();
        let mut s = OptimizerState::new(&x);
        momentum_step(&mut x, &g, &mut s, 0.9, 0.1).unwrap();
        momentum_step(&mut x, &g, &mut s, 0.9, 0.1).unwrap();
        assert_eq!(x, x0);
    }

    #[test]
    fn two_hand_momentum_steps() {
        let mut x = p(vec![0.0], vec![]);
        let g = p(vec![1.0], vec![]);
        let mut s = OptimizerState::new(&x);
        momentum_step(&mut x, &g, &mut s, 0.9, 0.1).unwrap();
        assert!((s.v.a.data()[0] - 0.1).abs() < 1e-15);
        assert!((x.a.data()[0] + 0.1).abs() < 1e-15);
        momentum_step(&mut x, &g, &mut s, 0.9, 0.1).unwrap();
        assert!((s.v.a.data()[0] - 0.19).abs() < 1e-15);
        assert!((x.a.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut x = p(vec![1.0], vec![2.0]);
        let g = p(vec![f64::NAN], vec![0.0]);
        let mut s = OptimizerState::new(&x);
        s.v.a.data_mut()[0] = 0.3;
        let before = (x.clone(), s.v.clone());
        assert_eq!(momentum_step(&mut x, &g, &mut s, 0.9, 0.1).unwrap(), StepOutcome::Rejected);
        assert_eq!(selective_step(&mut x, &g, &mut s, 0.9, 0.1, 0.2).unwrap(), StepOutcome::Rejected);
        assert_eq!((x, s.v.clone()), before);
        assert_eq!(s.rejected, 2);
    }

    #[test]
    fn rate_cases() {
        assert_eq!(adaptive_rate(0.1, 3.0, 0.0).unwrap(), 0.1);
        assert_eq!(adaptive_rate(0.1, 0.0, 0.7).unwrap(), 0.1);
        assert!((adaptive_rate(0.1, 2f64.ln(), 1.0).unwrap() - 0.05).abs() < 1e-16);
        assert!(adaptive_rate(0.1, 1.0, -0.1).is_err());
        assert_eq!(normalized_entropy(&[0.25; 4]), 1.0);
        assert_eq!(normalized_entropy(&[1.0, 0.0]), 0.0);
    }

    #[test]
    fn probability_cases() {
        let u = update_probabilities(&[0.3, -0.3, 0.3]).unwrap();
        assert!(u.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let d = update_probabilities(&[0.0, 100.0, 0.0]).unwrap();
        assert_eq!(d[1], 1.0);
        assert!(d[0] < 1e-40 && d[0] > 0.0);
        let h = update_probabilities(&[1.0, -2.0, 0.0]).unwrap();
        let s = 1f64.exp() + 2f64.exp() + 1.0;
        assert!((h[0] - 1f64.exp() / s).abs() < 1e-15);
        assert!((h[1] - 2f64.exp() / s).abs() < 1e-15);
        assert!((h[2] - 1.0 / s).abs() < 1e-15);
        assert!(update_probabilities(&[f64::NAN]).is_err());
    }

    #[test]
    fn high_threshold_updates_nothing() {
        let x0 = p(vec![1.0, 2.0], vec![3.0]);
        let mut x = x0.clone();
        let g = p(vec![0.5, -1.0], vec![2.0]);
        let mut s = OptimizerState::new(&x);
        let out = selective_step(&mut x, &g, &mut s, 0.9, 0.1, 0.999_999).unwrap();
        // The single-coordinate tensor has probability exactly 1 > τ.
        assert_eq!(out, StepOutcome::Applied { updated_fraction: 1.0 / 3.0 });
        assert_eq!(x.a, x0.a);
    }

    #[test]
    fn selective_matches_per_coordinate_oracle() {
        let mut rng = Rng::new(3);
        let x0 = p((0..6).map(|_| rng.normal()).collect(), (0..4).map(|_| rng.normal()).collect());
        let g = p((0..6).map(|_| rng.normal()).collect(), (0..4).map(|_| rng.normal()).collect());
        let mut x = x0.clone();
        let mut s = OptimizerState::new(&x);
        s.v.a.data_mut()[0] = 0.05;
        let v0 = s.v.clone();
        let tau = 0.17;
        selective_step(&mut x, &g, &mut s, 0.9, 0.1, tau).unwrap();
        for (name, xt, gt, vt, v0t, x0t) in [
            ("a", &x.a, &g.a, &s.v.a, &v0.a, &x0.a),
            ("b", &x.b, &g.b, &s.v.b, &v0.b, &x0.b),
        ] {
            let abs: Vec<f64> = gt.data().iter().map(|v| v.abs()).collect();
            let probs = softmax(&abs).unwrap();
            for j in 0..gt.len() {
                if probs[j] > tau {
                    let v = 0.9 * v0t.data()[j] + 0.1 * gt.data()[j];
                    assert_eq!(vt.data()[j], v, "{name}{j}");
                    assert_eq!(xt.data()[j], x0t.data()[j] - v);
                } else {
                    assert_eq!(vt.data()[j], v0t.data()[j]);
                    assert_eq!(xt.data()[j], x0t.data()[j]);
                }
            }
        }
    }

    #[test]
    fn reliability_cases() {
        let w = |e, i| reliability_weights(Reliability { explicit: e, implicit: i }).unwrap();
        assert_eq!(w(0.4, 0.4), (0.5, 0.5, false));
        assert_eq!(w(0.4, 0.0), (1.0, 0.0, false));
        let (a, b, _) = w(0.3, 0.1);
        assert!((a - 0.75).abs() < 1e-15 && (b - 0.25).abs() < 1e-15);
        assert_eq!(w(0.0, 0.0), (0.5, 0.5, true));
        let mut r = Reliability::default();
        r.observe(true, true, 0.99);
        assert!((r.explicit - 0.505).abs() < 1e-15);
        assert_eq!(r.implicit, 0.5);
    }

    #[test]
    fn combined_loss_reductions() {
        let x = p(vec![1.0, 2.0], vec![2.0]);
        let mut g = x.zeroed();
        let c = combined_feedback_loss(&[4.0, 2.0], &[], 1.0, 0.0, 0.0, &x, &mut g).unwrap();
        assert_eq!(c.value, 3.0);
        assert_eq!(c.explicit_scale, 0.5);
        assert_eq!(g, x.zeroed());
        let c = combined_feedback_loss(&[], &[1.0], 0.3, 0.7, 0.5, &x, &mut g).unwrap();
        assert!((c.value - (0.7 + 0.25 * 9.0)).abs() < 1e-15);
        assert_eq!(g, p(vec![0.5, 1.0], vec![1.0]));
        assert!(combined_feedback_loss(&[], &[], 0.5, 0.5, 0.0, &x, &mut g).is_err());
    }

    #[test]
    fn combined_loss_gradient_matches_fd() {
        // Explicit: (w·x − r)²; implicit: −log softmax(w ⊙ z)[t].
        let xs = [vec![0.5, -1.0, 0.3], vec![1.2, 0.1, -0.7]];
        let rs = [1.0, -0.5];
        let z = [0.4, -0.2, 1.5];
        let target = 2;
        let (alpha, beta, gamma) = (0.6, 0.4, 0.05);
        let theta = p(vec![0.2, -0.4, 0.9], vec![0.3]);
        let eval = |t: &P, g: Option<&mut P>| {
            let w = t.a.data();
            let se: Vec<f64> = xs
                .iter()
                .zip(&rs)
                .map(|(x, r)| {
                    let e = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + t.b.data()[0] - r;
                    e * e
                })
                .collect();
            let logits: Vec<f64> = w.iter().zip(&z).map(|(a, b)| a * b).collect();
            let probs = softmax(&logits).unwrap();
            let nll = vec![-probs[target].ln()];
            let mut scratch = t.zeroed();
            let g = g.unwrap_or(&mut scratch);
            let c = combined_feedback_loss(&se, &nll, alpha, beta, gamma, t, g).unwrap();
            for (x, r) in xs.iter().zip(&rs) {
                let e = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + t.b.data()[0] - r;
                for j in 0..3 {
                    g.a.data_mut()[j] += c.explicit_scale * 2.0 * e * x[j];
                }
                g.b.data_mut()[0] += c.explicit_scale * 2.0 * e;
            }
            for j in 0..3 {
                let d = probs[j] - if j == target { 1.0 } else { 0.0 };
                g.a.data_mut()[j] += c.implicit_scale * d * z[j];
            }
            c.value
        };
        let mut g = theta.zeroed();
        eval(&theta, Some(&mut g));
        let f = |flat: &[f64]| {
            let mut t = theta.clone();
            t.assign_flat(flat).unwrap();
            eval(&t, None)
        };
        let num = finite_diff_grad(f, &theta.flatten(), 1e-5).unwrap();
        assert!(max_relative_error(&g.flatten(), &num, 1e-8) < 1e-7);
    }

    #[test]
    fn ewc_cases() {
        let anchor = p(vec![1.0, 2.0], vec![3.0]);
        let ewc = EwcState {
            fisher: p(vec![2.0, 1.0], vec![0.0]),
            anchor: anchor.clone(),
            lambda: 1.0,
        };
        assert_eq!(ewc_penalty(&anchor, &ewc, None).unwrap(), 0.0);
        let moved = p(vec![4.0, 2.0], vec![100.0]);
        let mut g = moved.zeroed();
        assert_eq!(ewc_penalty(&moved, &ewc, Some(&mut g)).unwrap(), 9.0);
        assert_eq!(g, p(vec![6.0, 0.0], vec![0.0]));
        let none = EwcState {
            fisher: anchor.zeroed(),
            ..ewc
        };
        assert_eq!(ewc_penalty(&moved, &none, None).unwrap(), 0.0);
    }

    #[test]
    fn fisher_cases() {
        let x = p(vec![1.0, 2.0], vec![3.0]);
        let single = estimate_fisher(&x, 1, |_, g| {
            g.a = Tensor::vector(vec![3.0, -2.0]);
            Ok(())
        })
        .unwrap();
        assert_eq!(single, p(vec![9.0, 4.0], vec![0.0]));
        let mut rng = Rng::new(9);
        let grads: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let f = estimate_fisher(&x, 10, |k, g| {
            g.assign_flat(&grads[k])?;
            Ok(())
        })
        .unwrap();
        for j in 0..3 {
            let oracle = grads.iter().map(|g| g[j] * g[j]).sum::<f64>() / 10.0;
            assert!((f.flatten()[j] - oracle).abs() < 1e-15);
        }
        assert!(estimate_fisher(&x, 0, |_, _| Ok(())).is_err());
    }

    proptest! {
        #[test]
        fn probabilities_form_distribution(g in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let p = update_probabilities(&g).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn zero_threshold_equals_momentum(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let x0 = p((0..5).map(|_| rng.normal()).collect(), (0..3).map(|_| rng.normal()).collect());
            let g = p((0..5).map(|_| rng.normal()).collect(), (0..3).map(|_| rng.normal()).collect());
            let (mut x1, mut x2) = (x0.clone(), x0.clone());
            let mut s1 = OptimizerState::new(&x0);
            let mut s2 = OptimizerState::new(&x0);
            for _ in 0..3 {
                momentum_step(&mut x1, &g, &mut s1, 0.9, 0.05).unwrap();
                selective_step(&mut x2, &g, &mut s2, 0.9, 0.05, 0.0).unwrap();
            }
            prop_assert_eq!(x1, x2);
            prop_assert_eq!(s1, s2);
        }

        #[test]
        fn ewc_zero_iff_at_anchor_on_support(seed in 0u64..1000, shift in 0usize..4) {
            let mut rng = Rng::new(seed);
            let anchor = p((0..3).map(|_| rng.normal()).collect(), vec![rng.normal()]);
            let fisher = p(vec![1.0, 0.0, 2.0], vec![0.5]);
            let ewc = EwcState { fisher: fisher.clone(), anchor: anchor.clone(), lambda: 3.0 };
            let mut flat = anchor.flatten();
            flat[shift] += 0.5;
            let mut moved = anchor.clone();
            moved.assign_flat(&flat).unwrap();
            let pen = ewc_penalty(&moved, &ewc, None).unwrap();
            prop_assert_eq!(pen == 0.0, fisher.flatten()[shift] == 0.0);
        }
    }
}
