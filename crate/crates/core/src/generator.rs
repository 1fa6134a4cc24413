//! Next-item generation with a small causal decoder.
//!
//! The input sequence is
//! `[user soft token; context soft tokens; BOS; history item tokens]` plus
//! learned positions. Each block is residual causal self-attention followed by
//! a residual tanh feed-forward layer. The last hidden row is projected onto
//! the item catalog, so items are atomic tokens and ranking is a single step.

use crate::error::{Error, Result};
use crate::layers::{attention_backward, attention_forward, linear_backward, linear_forward, tanh_backward, tanh_inplace, AttentionCache};
use crate::numerics::tensor::{mat_vec, outer_acc, vec_mat};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}
crate::impl_params!(DecoderBlock { wq, wk, wv, w1, b1, w2, b2 });

impl DecoderBlock {
    pub fn new(d: usize, dk: usize, hidden: usize, rng: &mut Rng) -> Self {
        DecoderBlock {
            wq: Tensor::fan_in_uniform(&[d, dk], rng),
            wk: Tensor::fan_in_uniform(&[d, dk], rng),
            wv: Tensor::fan_in_uniform(&[d, d], rng),
            w1: Tensor::fan_in_uniform(&[d, hidden], rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::fan_in_uniform(&[hidden, d], rng),
            b2: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    /// Item ids `0..n_items`, then BOS, EOS, PAD.
    pub item_emb: Tensor,
    pub position: Tensor,
    pub user_proj: Tensor,
    pub ctx_proj: Tensor,
    pub blocks: Vec<DecoderBlock>,
    /// `[d × n_items]`, column `i` scores item `i`.
    pub w_out: Tensor,
    pub b_out: Tensor,
}
crate::impl_params!(GeneratorParams { item_emb, position, user_proj, ctx_proj, blocks, w_out, b_out });

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorShape {
    pub n_items: usize,
    pub d: usize,
    pub dk: usize,
    /// Width of the user and context vectors fed in as soft tokens.
    pub d_in: usize,
    pub blocks: usize,
    pub max_len: usize,
}

impl GeneratorParams {
    pub fn new(shape: GeneratorShape, rng: &mut Rng) -> Result<Self> {
        let GeneratorShape {
            n_items,
            d,
            dk,
            d_in,
            blocks,
            max_len,
        } = shape;
        if n_items == 0 || d == 0 || dk == 0 || d_in == 0 || max_len < 2 {
            return Err(Error::invalid("generator dimensions must be positive"));
        }
        if !(1..=2).contains(&blocks) {
            return Err(Error::invalid("decoder takes one or two blocks"));
        }
        let mut item_emb = Tensor::uniform(&[n_items + 3, d], 0.1, rng);
        item_emb.row_mut(n_items + 2).fill(0.0);
        // Own stream: leading rows do not depend on `max_len`.
        let position = Tensor::uniform(&[max_len, d], 0.1, &mut rng.fork(1));
        Ok(GeneratorParams {
            item_emb,
            position,
            user_proj: Tensor::fan_in_uniform(&[d_in, d], rng),
            ctx_proj: Tensor::fan_in_uniform(&[d_in, d], rng),
            blocks: (0..blocks).map(|_| DecoderBlock::new(d, dk, 2 * d, rng)).collect(),
            w_out: Tensor::fan_in_uniform(&[d, n_items], rng),
            b_out: Tensor::zeros(&[n_items]),
        })
    }

    pub fn n_items(&self) -> usize {
        self.w_out.cols()
    }

    pub fn dim(&self) -> usize {
        self.item_emb.cols()
    }

    pub fn max_len(&self) -> usize {
        self.position.rows()
    }

    pub fn bos(&self) -> usize {
        self.n_items()
    }

    pub fn eos(&self) -> usize {
        self.n_items() + 1
    }

    pub fn pad(&self) -> usize {
        self.n_items() + 2
    }
}

/// Everything the decoder conditions on.
#[derive(Clone, Copy, Debug)]
pub struct DecoderInput<'a> {
    pub h_user: &'a [f64],
    /// Retrieved context embeddings, treated as constants.
    pub context: &'a [Vec<f64>],
    /// History item ids, oldest first.
    pub history: &'a [usize],
    /// Optional content vectors added to the history item embeddings, one row
    /// per history item.
    pub content: Option<&'a Tensor>,
}

impl DecoderInput<'_> {
    fn prefix(&self) -> usize {
        self.context.len() + 2
    }

    pub fn seq_len(&self) -> usize {
        self.prefix() + self.history.len()
    }
}

#[derive(Clone, Debug)]
struct BlockCache {
    attn: AttentionCache,
    x_mid: Tensor,
    hidden: Tensor,
}

#[derive(Clone, Debug)]
pub struct DecoderCache {
    blocks: Vec<BlockCache>,
    /// Final hidden rows, one per position.
    pub hidden: Tensor,
    /// Output logits at the last position.
    pub logits: Vec<f64>,
}

impl DecoderCache {
    pub fn last_hidden(&self) -> &[f64] {
        self.hidden.row(self.hidden.rows() - 1)
    }
}

/// Gradients with respect to the non-parameter inputs.
#[derive(Clone, Debug)]
pub struct InputGrads {
    pub h_user: Vec<f64>,
    pub content: Option<Tensor>,
}

fn check_input(input: &DecoderInput, p: &GeneratorParams) -> Result<()> {
    let d_in = p.user_proj.rows();
    if input.h_user.len() != d_in {
        return Err(Error::shape("user vector width"));
    }
    if input.context.iter().any(|c| c.len() != p.ctx_proj.rows()) {
        return Err(Error::shape("context vector width"));
    }
    if input.seq_len() > p.max_len() {
        return Err(Error::invalid(format!(
            "sequence of {} exceeds decoder length {}",
            input.seq_len(),
            p.max_len()
        )));
    }
    if let Some(&bad) = input.history.iter().find(|&&i| i >= p.n_items()) {
        return Err(Error::invalid(format!("history item {bad} outside catalog")));
    }
    if let Some(c) = input.content {
        if c.rows() != input.history.len() || c.cols() != p.dim() {
            return Err(Error::shape("content rows must match history"));
        }
    }
    Ok(())
}

fn embed(input: &DecoderInput, p: &GeneratorParams) -> Result<Tensor> {
    let d = p.dim();
    let mut x = Tensor::zeros(&[input.seq_len(), d]);
    x.row_mut(0).copy_from_slice(&vec_mat(input.h_user, &p.user_proj)?);
    for (j, c) in input.context.iter().enumerate() {
        x.row_mut(1 + j).copy_from_slice(&vec_mat(c, &p.ctx_proj)?);
    }
    let pre = input.prefix();
    x.row_mut(pre - 1).copy_from_slice(p.item_emb.row(p.bos()));
    for (t, &item) in input.history.iter().enumerate() {
        let row = x.row_mut(pre + t);
        row.copy_from_slice(p.item_emb.row(item));
        if let Some(c) = input.content {
            for (o, v) in row.iter_mut().zip(c.row(t)) {
                *o += v;
            }
        }
    }
    for r in 0..x.rows() {
        for (o, v) in x.row_mut(r).iter_mut().zip(p.position.row(r)) {
            *o += v;
        }
    }
    Ok(x)
}

pub fn forward(input: &DecoderInput, p: &GeneratorParams) -> Result<DecoderCache> {
    check_input(input, p)?;
    let mut x = embed(input, p)?;
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let attn = attention_forward(&x, &b.wq, &b.wk, &b.wv, true)?;
        let mut x_mid = x;
        x_mid.axpy(1.0, &attn.z)?;
        let mut hidden = linear_forward(&x_mid, &b.w1, Some(&b.b1))?;
        tanh_inplace(&mut hidden);
        let mut out = linear_forward(&hidden, &b.w2, Some(&b.b2))?;
        out.axpy(1.0, &x_mid)?;
        blocks.push(BlockCache { attn, x_mid, hidden });
        x = out;
    }
    let last = x.row(x.rows() - 1);
    let mut logits = vec_mat(last, &p.w_out)?;
    for (l, b) in logits.iter_mut().zip(p.b_out.data()) {
        *l += b;
    }
    Ok(DecoderCache {
        blocks,
        hidden: x,
        logits,
    })
}

/// Logits at every position, one row each.
pub fn position_logits(cache: &DecoderCache, p: &GeneratorParams) -> Result<Tensor> {
    linear_forward(&cache.hidden, &p.w_out, Some(&p.b_out))
}

/// Backpropagates `d_logits` (and optionally an extra gradient on the last
/// hidden row) through the decoder, accumulating into `g`.
pub fn backward(
    input: &DecoderInput,
    cache: &DecoderCache,
    d_logits: &[f64],
    d_last_hidden: Option<&[f64]>,
    p: &GeneratorParams,
    g: &mut GeneratorParams,
) -> Result<InputGrads> {
    let n = cache.hidden.rows();
    let last = cache.last_hidden();
    outer_acc(&mut g.w_out, last, d_logits)?;
    for (o, v) in g.b_out.data_mut().iter_mut().zip(d_logits) {
        *o += v;
    }
    let mut dh_last = mat_vec(&p.w_out, d_logits)?;
    if let Some(extra) = d_last_hidden {
        for (o, v) in dh_last.iter_mut().zip(extra) {
            *o += v;
        }
    }
    let mut dx = Tensor::zeros(&[n, p.dim()]);
    dx.row_mut(n - 1).copy_from_slice(&dh_last);

    for (bi, bc) in cache.blocks.iter().enumerate().rev() {
        let b = &p.blocks[bi];
        let gb = &mut g.blocks[bi];
        let d_hidden = linear_backward(&bc.hidden, &dx, &b.w2, &mut gb.w2, Some(&mut gb.b2))?;
        let d_pre = tanh_backward(&bc.hidden, &d_hidden);
        let mut d_mid = linear_backward(&bc.x_mid, &d_pre, &b.w1, &mut gb.w1, Some(&mut gb.b1))?;
        d_mid.axpy(1.0, &dx)?;
        let d_attn_in = attention_backward(&bc.attn, &d_mid, &b.wq, &b.wk, &b.wv, &mut gb.wq, &mut gb.wk, &mut gb.wv)?;
        dx = d_mid;
        dx.axpy(1.0, &d_attn_in)?;
    }

    for r in 0..n {
        for (o, v) in g.position.row_mut(r).iter_mut().zip(dx.row(r)) {
            *o += v;
        }
    }
    outer_acc(&mut g.user_proj, input.h_user, dx.row(0))?;
    let h_user = mat_vec(&p.user_proj, dx.row(0))?;
    for (j, c) in input.context.iter().enumerate() {
        outer_acc(&mut g.ctx_proj, c, dx.row(1 + j))?;
    }
    let pre = input.prefix();
    let bos = p.bos();
    for (o, v) in g.item_emb.row_mut(bos).iter_mut().zip(dx.row(pre - 1)) {
        *o += v;
    }
    for (t, &item) in input.history.iter().enumerate() {
        for (o, v) in g.item_emb.row_mut(item).iter_mut().zip(dx.row(pre + t)) {
            *o += v;
        }
    }
    let content = input.content.map(|_| {
        let rows: Vec<Vec<f64>> = (0..input.history.len()).map(|t| dx.row(pre + t).to_vec()).collect();
        Tensor::from_rows(&rows, p.dim()).expect("decoder width")
    });
    Ok(InputGrads { h_user, content })
}

/// Softmax over `logits` with `exclude`d entries fixed at probability zero.
pub fn masked_softmax(logits: &[f64], exclude: &[usize]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("logits not finite".into()));
    }
    let mut keep = vec![true; logits.len()];
    for &i in exclude {
        if i < keep.len() {
            keep[i] = false;
        }
    }
    let max = logits
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::invalid("every item is excluded"));
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(&keep)
        .map(|(v, k)| if *k { (v - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct GenerationRequest<'a> {
    pub input: DecoderInput<'a>,
    /// Items that must not be recommended.
    pub exclude: &'a [usize],
    pub n: usize,
}

pub fn next_item_distribution(request: &GenerationRequest, p: &GeneratorParams) -> Result<Vec<f64>> {
    let cache = forward(&request.input, p)?;
    masked_softmax(&cache.logits, request.exclude)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    /// `(item, probability)` in descending probability, ties by ascending id.
    pub items: Vec<(usize, f64)>,
    /// Fewer than `n` items were available.
    pub truncated: bool,
}

/// Top `n` of a distribution, skipping zero-probability (excluded) items.
pub fn rank_distribution(probs: &[f64], exclude: &[usize], n: usize) -> Result<Ranked> {
    if n == 0 {
        return Err(Error::invalid("list length must be at least 1"));
    }
    let mut mask = vec![false; probs.len()];
    for &i in exclude {
        if i < mask.len() {
            mask[i] = true;
        }
    }
    let mut items: Vec<(usize, f64)> = probs
        .iter()
        .enumerate()
        .filter(|(i, _)| !mask[*i])
        .map(|(i, &v)| (i, v))
        .collect();
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let truncated = items.len() < n;
    items.truncate(n);
    Ok(Ranked { items, truncated })
}

pub fn recommend_top_n(request: &GenerationRequest, p: &GeneratorParams) -> Result<Ranked> {
    let probs = next_item_distribution(request, p)?;
    rank_distribution(&probs, request.exclude, request.n)
}

#[derive(Clone, Debug)]
pub struct NllOutput {
    pub loss: f64,
    pub probs: Vec<f64>,
    pub inputs: InputGrads,
    pub cache: DecoderCache,
}

/// `-log p(target)`, with gradients accumulated into `g`. `scale` multiplies
/// the loss gradient (for example an importance weight).
pub fn sequence_nll(
    request: &GenerationRequest,
    target: usize,
    scale: f64,
    p: &GeneratorParams,
    g: &mut GeneratorParams,
) -> Result<NllOutput> {
    if target >= p.n_items() {
        return Err(Error::invalid(format!("target {target} outside catalog")));
    }
    let cache = forward(&request.input, p)?;
    let probs = masked_softmax(&cache.logits, request.exclude)?;
    if probs[target] == 0.0 {
        return Err(Error::invalid("target has zero probability under the mask"));
    }
    let loss = -probs[target].ln();
    let mut d_logits: Vec<f64> = probs.iter().map(|q| scale * q).collect();
    d_logits[target] -= scale;
    let inputs = backward(&request.input, &cache, &d_logits, None, p, g)?;
    Ok(NllOutput {
        loss,
        probs,
        inputs,
        cache,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error, softmax, ParamSet, Rng};
    use proptest::prelude::*;

    fn shape(n_items: usize, blocks: usize) -> GeneratorShape {
        GeneratorShape {
            n_items,
            d: 4,
            dk: 3,
            d_in: 5,
            blocks,
            max_len: 10,
        }
    }

    fn fixture(seed: u64) -> (GeneratorParams, Vec<f64>, Vec<Vec<f64>>, Tensor) {
        let mut rng = Rng::new(seed);
        let p = GeneratorParams::new(shape(6, 2), &mut rng).unwrap();
        let h: Vec<f64> = (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let ctx: Vec<Vec<f64>> = (0..2).map(|_| (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let content = Tensor::uniform(&[3, 4], 0.5, &mut rng);
        (p, h, ctx, content)
    }

    #[test]
    fn zero_output_layer_is_uniform() {
        let (mut p, h, ctx, _) = fixture(1);
        p.w_out.fill(0.0);
        let req = GenerationRequest {
            input: DecoderInput {
                h_user: &h,
                context: &ctx,
                history: &[1, 2],
                content: None,
            },
            exclude: &[],
            n: 3,
        };
        let probs = next_item_distribution(&req, &p).unwrap();
        for v in &probs {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
        let mut g = p.zeroed();
        let out = sequence_nll(&req, 4, 1.0, &p, &mut g).unwrap();
        assert!((out.loss - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn excluded_items_get_zero_probability() {
        let (p, h, ctx, _) = fixture(2);
        let input = DecoderInput {
            h_user: &h,
            context: &ctx,
            history: &[0],
            content: None,
        };
        let req = GenerationRequest {
            input,
            exclude: &[0, 3],
            n: 10,
        };
        let probs = next_item_distribution(&req, &p).unwrap();
        assert_eq!(probs[0], 0.0);
        assert_eq!(probs[3], 0.0);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let ranked = recommend_top_n(&req, &p).unwrap();
        assert!(ranked.truncated);
        assert_eq!(ranked.items.len(), 4);
        assert!(ranked.items.iter().all(|(i, _)| *i != 0 && *i != 3));
        let all = GenerationRequest {
            exclude: &[0, 1, 2, 3, 4, 5],
            ..req
        };
        assert!(next_item_distribution(&all, &p).is_err());
        let mut g = p.zeroed();
        assert!(sequence_nll(&req, 3, 1.0, &p, &mut g).is_err());
    }

    #[test]
    fn hand_two_item_toy() {
        // Inert blocks leave the last hidden row equal to its input embedding.
        let mut rng = Rng::new(3);
        let mut p = GeneratorParams::new(
            GeneratorShape {
                n_items: 2,
                d: 2,
                dk: 1,
                d_in: 2,
                blocks: 1,
                max_len: 4,
            },
            &mut rng,
        )
        .unwrap();
        p.blocks[0].wv.fill(0.0);
        p.blocks[0].w2.fill(0.0);
        p.item_emb = Tensor::matrix(5, 2, vec![0.5, -0.5, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        p.position = Tensor::matrix(4, 2, vec![0.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.0, 0.0]).unwrap();
        p.w_out = Tensor::matrix(2, 2, vec![1.0, -1.0, 2.0, 0.5]).unwrap();
        p.b_out = Tensor::vector(vec![0.0, 0.3]);
        let h = [0.3, 0.7];
        let req = GenerationRequest {
            input: DecoderInput {
                h_user: &h,
                context: &[],
                history: &[1],
                content: None,
            },
            exclude: &[],
            n: 1,
        };
        let probs = next_item_distribution(&req, &p).unwrap();
        // h_t = e_1 + pos_2 = (1.1, 0.2)
        let z0: f64 = 1.1 * 1.0 + 0.2 * 2.0;
        let z1: f64 = 1.1 * -1.0 + 0.2 * 0.5 + 0.3;
        let e0 = z0.exp() / (z0.exp() + z1.exp());
        assert!((probs[0] - e0).abs() < 1e-15);
        assert_eq!(recommend_top_n(&req, &p).unwrap().items[0].0, 0);
    }

    #[test]
    fn ranking_matches_sorted_distribution_and_is_deterministic() {
        let (p, h, ctx, content) = fixture(4);
        let req = GenerationRequest {
            input: DecoderInput {
                h_user: &h,
                context: &ctx,
                history: &[5, 2, 2],
                content: Some(&content),
            },
            exclude: &[2],
            n: 4,
        };
        let probs = next_item_distribution(&req, &p).unwrap();
        let mut oracle: Vec<usize> = (0..6).filter(|&i| i != 2).collect();
        oracle.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
        let got = recommend_top_n(&req, &p).unwrap();
        assert_eq!(got.items.iter().map(|x| x.0).collect::<Vec<_>>(), oracle[..4].to_vec());
        assert!(!got.truncated);
        assert_eq!(got, recommend_top_n(&req, &p).unwrap());
        let one = GenerationRequest { n: 1, ..req };
        assert_eq!(recommend_top_n(&one, &p).unwrap().items[0].0, oracle[0]);
    }

    #[test]
    fn certain_target_has_zero_loss() {
        let (mut p, h, _, _) = fixture(5);
        p.w_out.fill(0.0);
        p.b_out = Tensor::vector(vec![0.0, 0.0, 800.0, 0.0, 0.0, 0.0]);
        let req = GenerationRequest {
            input: DecoderInput {
                h_user: &h,
                context: &[],
                history: &[],
                content: None,
            },
            exclude: &[],
            n: 1,
        };
        let mut g = p.zeroed();
        assert_eq!(sequence_nll(&req, 2, 1.0, &p, &mut g).unwrap().loss, 0.0);
    }

    #[test]
    fn gradients_match_fd() {
        #[derive(Clone)]
        struct P {
            gen: GeneratorParams,
            h: Tensor,
            content: Tensor,
        }
        crate::impl_params!(P { gen, h, content });
        for seed in 0..3 {
            let (gen, h, ctx, content) = fixture(10 + seed);
            let p = P {
                gen,
                h: Tensor::vector(h),
                content,
            };
            let history = [3, 0, 3];
            let exclude = [1];
            let run = |s: &P, g: Option<&mut GeneratorParams>| {
                let req = GenerationRequest {
                    input: DecoderInput {
                        h_user: s.h.data(),
                        context: &ctx,
                        history: &history,
                        content: Some(&s.content),
                    },
                    exclude: &exclude,
                    n: 1,
                };
                let mut scratch = s.gen.zeroed();
                let g = g.unwrap_or(&mut scratch);
                sequence_nll(&req, 4, 0.7, &s.gen, g).unwrap()
            };
            let mut g = p.zeroed();
            let out = run(&p, Some(&mut g.gen));
            g.h = Tensor::vector(out.inputs.h_user);
            g.content = out.inputs.content.unwrap();
            let f = |flat: &[f64]| {
                let mut s = p.clone();
                s.assign_flat(flat).unwrap();
                0.7 * run(&s, None).loss
            };
            let num = finite_diff_grad(f, &p.flatten(), 1e-5).unwrap();
            let err = max_relative_error(&g.flatten(), &num, 1e-6);
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn later_history_does_not_change_earlier_logits() {
        let (p, h, ctx, _) = fixture(6);
        let run = |hist: &[usize]| {
            let input = DecoderInput {
                h_user: &h,
                context: &ctx,
                history: hist,
                content: None,
            };
            position_logits(&forward(&input, &p).unwrap(), &p).unwrap()
        };
        let a = run(&[0, 1, 2, 3]);
        let b = run(&[0, 1, 5, 3]);
        // history position 2 sits at row prefix + 2 = 6
        for r in 0..6 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(6), b.row(6));
    }

    #[test]
    fn empty_context_equals_no_context() {
        let (p, h, _, _) = fixture(7);
        let none: Vec<Vec<f64>> = Vec::new();
        let input = DecoderInput {
            h_user: &h,
            context: &none,
            history: &[1, 4],
            content: None,
        };
        let a = forward(&input, &p).unwrap();
        let b = forward(&DecoderInput { context: &[], ..input }, &p).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let (p, h, ctx, content) = fixture(8);
        let base = DecoderInput {
            h_user: &h,
            context: &ctx,
            history: &[1],
            content: None,
        };
        assert!(forward(&DecoderInput { history: &[6], ..base }, &p).is_err());
        assert!(forward(&DecoderInput { history: &[0; 7], ..base }, &p).is_err());
        assert!(forward(&DecoderInput { h_user: &h[..2], ..base }, &p).is_err());
        assert!(forward(&DecoderInput { content: Some(&content), ..base }, &p).is_err());
        assert!(GeneratorParams::new(shape(6, 3), &mut Rng::new(1)).is_err());
    }

    proptest! {
        #[test]
        fn masking_preserves_ratios(logits in prop::collection::vec(-5.0f64..5.0, 6), ex in 0usize..6) {
            let full = softmax(&logits).unwrap();
            let masked = masked_softmax(&logits, &[ex]).unwrap();
            prop_assert!((masked.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let others: Vec<usize> = (0..6).filter(|&i| i != ex).collect();
            for w in others.windows(2) {
                let r1 = full[w[0]] / full[w[1]];
                let r2 = masked[w[0]] / masked[w[1]];
                prop_assert!((r1 - r2).abs() <= 1e-9 * r1.abs().max(1.0));
            }
        }
    }
}
