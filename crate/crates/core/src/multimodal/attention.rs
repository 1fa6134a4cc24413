//! Asymmetric cross-modal attention: queries from modality `m`, keys and
//! values from modality `n`, with separate projections per ordered pair.

use crate::error::{Error, Result};
use crate::layers::{cross_attention_backward, cross_attention_forward, AttentionCache, AttentionGrads};
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CrossPair {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}
crate::impl_params!(CrossPair { wq, wk, wv });

impl CrossPair {
    pub fn new(d: usize, dk: usize, rng: &mut Rng) -> Self {
        CrossPair {
            wq: Tensor::fan_in_uniform(&[d, dk], rng),
            wk: Tensor::fan_in_uniform(&[d, dk], rng),
            wv: Tensor::fan_in_uniform(&[d, d], rng),
        }
    }
}

/// One [`CrossPair`] per ordered pair `(m, n)`, `m != n`, stored by `m`
/// then `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossModalParams {
    pub pairs: Vec<CrossPair>,
}
crate::impl_params!(CrossModalParams { pairs });

impl CrossModalParams {
    pub fn new(modalities: usize, d: usize, dk: usize, rng: &mut Rng) -> Self {
        let n = modalities * modalities.saturating_sub(1);
        CrossModalParams {
            pairs: (0..n).map(|_| CrossPair::new(d, dk, rng)).collect(),
        }
    }

    pub fn modalities(&self) -> usize {
        // n(n-1) = pairs
        let mut m = 1;
        while m * (m - 1) < self.pairs.len() {
            m += 1;
        }
        m
    }

    pub fn index(&self, m: usize, n: usize) -> Result<usize> {
        let count = self.modalities();
        if m == n || m >= count || n >= count {
            return Err(Error::invalid(format!("no cross-modal pair ({m}, {n})")));
        }
        Ok(m * (count - 1) + if n > m { n - 1 } else { n })
    }
}

/// Attends each query row of `h_m` over the rows of `h_n`. The output
/// (`cache.z`) has one row per query, each a convex combination of the
/// value-projected rows of `h_n`.
pub fn cross_modal_attend(h_m: &Tensor, h_n: &Tensor, pair: &CrossPair) -> Result<AttentionCache> {
    cross_attention_forward(h_m, h_n, &pair.wq, &pair.wk, &pair.wv, false)
}

pub fn cross_modal_backward(
    cache: &AttentionCache,
    d_out: &Tensor,
    pair: &CrossPair,
    g: &mut CrossPair,
) -> Result<AttentionGrads> {
    cross_attention_backward(cache, d_out, &pair.wq, &pair.wk, &pair.wv, &mut g.wq, &mut g.wk, &mut g.wv)
}
