//! Modality encoders, cross-modal attention and adaptive fusion, composed into
//! one stack that maps an item's (or a user's) raw features to a single
//! fused vector.
//!
//! Modalities are text, categories and numeric features, in that fixed
//! order; a modality is present only if the dataset has it. Cross-modal
//! outputs are added back to the querying modality's vector before fusion:
//! `h'_m = h_m + mean_{n != m} attend(h_m, rows_n)`, skipping modalities with
//! no rows.

pub mod attention;
pub mod encoders;
pub mod fusion;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::AttentionCache;
use crate::numerics::{Rng, Tensor};
pub use attention::{cross_modal_attend, cross_modal_backward, CrossModalParams, CrossPair};
pub use encoders::{spread_pooled, CategoricalEncoder, Encoded, NumericEncoder, TextEncoder};
pub use fusion::{fuse, fusion_backward, fusion_forward, fusion_weights, FusionCache, FusionParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Categorical,
    Numerical,
}

/// Raw features of one item or user.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModalInput {
    pub tokens: Vec<usize>,
    /// Category ids; repeats are allowed and weight the mean.
    pub categories: Vec<usize>,
    pub numeric: Vec<f64>,
}

/// Which parts of the stack run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackOptions {
    /// Off: the output is the text vector alone.
    pub fusion: bool,
    pub cross_modal: bool,
}

impl Default for StackOptions {
    fn default() -> Self {
        StackOptions {
            fusion: true,
            cross_modal: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalParams {
    pub text: TextEncoder,
    pub categorical: Option<CategoricalEncoder>,
    pub numeric: Option<NumericEncoder>,
    pub cross: CrossModalParams,
    pub fusion: FusionParams,
}
crate::impl_params!(MultimodalParams { text, categorical, numeric, cross, fusion });

#[derive(Clone, Debug)]
struct CrossUse {
    m: usize,
    n: usize,
    count: usize,
    cache: AttentionCache,
}

#[derive(Clone, Debug)]
pub struct MultimodalCache {
    text: encoders::TextCache,
    categorical: Option<encoders::CategoricalCache>,
    numeric: Option<encoders::NumericCache>,
    cross: Vec<CrossUse>,
    /// Modality vectors after the cross-modal residual, in declared order.
    pub modal: Vec<Vec<f64>>,
    fusion: Option<FusionCache>,
    pub fused: Vec<f64>,
}

impl MultimodalCache {
    pub fn alpha(&self) -> Option<&[f64]> {
        self.fusion.as_ref().map(|f| f.alpha.as_slice())
    }
}

impl MultimodalParams {
    /// `n_categories == 0` or `numeric_dim == 0` leaves that modality out.
    pub fn new(
        vocab: usize,
        n_categories: usize,
        numeric_dim: usize,
        d: usize,
        dk: usize,
        max_tokens: usize,
        rng: &mut Rng,
    ) -> Self {
        let text = TextEncoder::new(vocab, max_tokens, d, dk, rng);
        let categorical = (n_categories > 0).then(|| CategoricalEncoder::new(n_categories, d, rng));
        let numeric = (numeric_dim > 0).then(|| NumericEncoder::new(numeric_dim, d, rng));
        let m = 1 + categorical.is_some() as usize + numeric.is_some() as usize;
        MultimodalParams {
            text,
            categorical,
            numeric,
            cross: CrossModalParams::new(m, d, dk, rng),
            fusion: FusionParams::new(m, d, rng),
        }
    }

    pub fn modalities(&self) -> Vec<Modality> {
        let mut out = vec![Modality::Text];
        if self.categorical.is_some() {
            out.push(Modality::Categorical);
        }
        if self.numeric.is_some() {
            out.push(Modality::Numerical);
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.text.dim()
    }

    pub fn forward(&self, input: &ModalInput, opts: StackOptions) -> Result<MultimodalCache> {
        let text = self.text.forward(&input.tokens)?;
        let categorical = match &self.categorical {
            Some(c) => Some(c.forward(&input.categories)?),
            None if !input.categories.is_empty() => {
                return Err(Error::invalid("categories given but the model has no categorical encoder"))
            }
            None => None,
        };
        let numeric = match &self.numeric {
            Some(n) => Some(n.forward(&input.numeric)?),
            None => None,
        };

        if !opts.fusion {
            let fused = text.out.pooled.clone();
            return Ok(MultimodalCache {
                modal: vec![fused.clone()],
                text,
                categorical,
                numeric,
                cross: Vec::new(),
                fusion: None,
                fused,
            });
        }

        let encoded: Vec<&Encoded> = std::iter::once(&text.out)
            .chain(categorical.as_ref().map(|c| &c.out))
            .chain(numeric.as_ref().map(|n| &n.out))
            .collect();
        let mut modal: Vec<Vec<f64>> = encoded.iter().map(|e| e.pooled.clone()).collect();
        let mut cross = Vec::new();
        if opts.cross_modal && encoded.len() > 1 {
            for m in 0..encoded.len() {
                let keys: Vec<usize> = (0..encoded.len())
                    .filter(|&n| n != m && !encoded[n].is_empty())
                    .collect();
                let query = Tensor::from_rows(&[encoded[m].pooled.clone()], self.dim())?;
                for &n in &keys {
                    let pair = &self.cross.pairs[self.cross.index(m, n)?];
                    let cache = cross_modal_attend(&query, &encoded[n].rows, pair)?;
                    for (o, v) in modal[m].iter_mut().zip(cache.z.row(0)) {
                        *o += v / keys.len() as f64;
                    }
                    cross.push(CrossUse {
                        m,
                        n,
                        count: keys.len(),
                        cache,
                    });
                }
            }
        }
        let f = fusion_forward(&modal, &self.fusion)?;
        Ok(MultimodalCache {
            fused: f.fused.clone(),
            text,
            categorical,
            numeric,
            cross,
            modal,
            fusion: Some(f),
        })
    }

    /// Accumulates into `g` the gradient of a loss whose derivative with
    /// respect to the fused vector is `d_fused`.
    pub fn backward(&self, cache: &MultimodalCache, d_fused: &[f64], g: &mut MultimodalParams) -> Result<()> {
        let d = self.dim();
        let rows_of = |e: &Encoded| Tensor::zeros(&[e.rows.rows(), d]);
        let mut d_rows = vec![rows_of(&cache.text.out)];
        if let Some(c) = &cache.categorical {
            d_rows.push(rows_of(&c.out));
        }
        if let Some(n) = &cache.numeric {
            d_rows.push(rows_of(&n.out));
        }

        let d_pooled: Vec<Vec<f64>> = match &cache.fusion {
            None => vec![d_fused.to_vec()],
            Some(f) => {
                let mut dp = fusion_backward(&cache.modal, f, d_fused, &self.fusion, &mut g.fusion)?;
                let mut dq_extra = vec![vec![0.0; d]; dp.len()];
                for u in &cache.cross {
                    let k = self.cross.index(u.m, u.n)?;
                    let scale = 1.0 / u.count as f64;
                    let dout = Tensor::from_rows(&[dp[u.m].iter().map(|v| v * scale).collect()], d)?;
                    let io = cross_modal_backward(&u.cache, &dout, &self.cross.pairs[k], &mut g.cross.pairs[k])?;
                    for (o, v) in dq_extra[u.m].iter_mut().zip(io.dxq.row(0)) {
                        *o += v;
                    }
                    d_rows[u.n].axpy(1.0, &io.dxkv)?;
                }
                for (a, b) in dp.iter_mut().zip(dq_extra) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x += y;
                    }
                }
                dp
            }
        };

        for (dr, dp) in d_rows.iter_mut().zip(&d_pooled) {
            spread_pooled(dr, dp);
        }
        self.text.backward(&cache.text, &d_rows[0], &mut g.text)?;
        if cache.fusion.is_none() {
            return Ok(());
        }
        let mut slot = 0;
        if let (Some(p), Some(c), Some(gc)) = (&self.categorical, &cache.categorical, g.categorical.as_mut()) {
            slot += 1;
            p.backward(c, &d_rows[slot], gc);
        }
        if let (Some(p), Some(c), Some(gn)) = (&self.numeric, &cache.numeric, g.numeric.as_mut()) {
            slot += 1;
            p.backward(c, &d_rows[slot], gn)?;
        }
        Ok(())
    }
}

/// Gradient of every multimodal parameter for a loss with upstream gradient
/// `d_fused` on the fused output.
pub fn grads_multimodal(
    params: &MultimodalParams,
    input: &ModalInput,
    opts: StackOptions,
    d_fused: &[f64],
) -> Result<MultimodalParams> {
    use crate::numerics::ParamSet;
    let cache = params.forward(input, opts)?;
    let mut g = params.zeroed();
    params.backward(&cache, d_fused, &mut g)?;
    Ok(g)
}
