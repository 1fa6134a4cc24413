//! Per-modality encoders. Each produces a set of `d`-dimensional rows (what
//! other modalities attend over) and their mean (the modality vector).

use crate::error::{Error, Result};
use crate::layers::{attention_backward, attention_forward, AttentionCache};
use crate::numerics::tensor::{matmul, matmul_at_acc, matmul_bt, outer_acc, vec_mat};
use crate::numerics::{Rng, Tensor};

/// Output of one encoder: the rows and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub rows: Tensor,
    pub pooled: Vec<f64>,
}

impl Encoded {
    fn from_rows(rows: Tensor) -> Self {
        let n = rows.rows();
        let mut pooled = vec![0.0; rows.cols()];
        for r in 0..n {
            for (p, v) in pooled.iter_mut().zip(rows.row(r)) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= n as f64);
        Encoded { rows, pooled }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0 || self.rows.is_empty()
    }
}

/// Folds a gradient on the pooled mean into the per-row gradient.
pub fn spread_pooled(d_rows: &mut Tensor, d_pooled: &[f64]) {
    let n = d_rows.rows();
    if n == 0 || d_rows.is_empty() {
        return;
    }
    let inv = 1.0 / n as f64;
    for r in 0..n {
        for (o, g) in d_rows.row_mut(r).iter_mut().zip(d_pooled) {
            *o += g * inv;
        }
    }
}

/// Token embeddings plus learned positions, one self-attention layer and an
/// output projection, mean-pooled.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub embedding: Tensor,
    pub position: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    /// Representation of a text with no tokens.
    pub empty: Tensor,
}
crate::impl_params!(TextEncoder { embedding, position, wq, wk, wv, wo, empty });

#[derive(Clone, Debug)]
pub struct TextCache {
    tokens: Vec<usize>,
    att: Option<AttentionCache>,
    pub out: Encoded,
}

impl TextEncoder {
    pub fn new(vocab: usize, max_len: usize, d: usize, dk: usize, rng: &mut Rng) -> Self {
        let emb_bound = 1.0 / (d as f64).sqrt();
        TextEncoder {
            embedding: Tensor::uniform(&[vocab.max(1), d], emb_bound, rng),
            position: Tensor::uniform(&[max_len.max(1), d], emb_bound, rng),
            wq: Tensor::fan_in_uniform(&[d, dk], rng),
            wk: Tensor::fan_in_uniform(&[d, dk], rng),
            wv: Tensor::fan_in_uniform(&[d, d], rng),
            wo: Tensor::fan_in_uniform(&[d, d], rng),
            empty: Tensor::uniform(&[d], emb_bound, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn max_len(&self) -> usize {
        self.position.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<TextCache> {
        if tokens.len() > self.max_len() {
            return Err(Error::invalid(format!(
                "{} tokens exceed the maximum of {}",
                tokens.len(),
                self.max_len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::invalid(format!("token id {t} outside vocabulary")));
        }
        if tokens.is_empty() {
            let rows = Tensor::from_rows(&[self.empty.data().to_vec()], self.dim())?;
            return Ok(TextCache {
                tokens: Vec::new(),
                att: None,
                out: Encoded::from_rows(rows),
            });
        }
        let d = self.dim();
        let mut x = Tensor::zeros(&[tokens.len(), d]);
        for (p, &t) in tokens.iter().enumerate() {
            let row = x.row_mut(p);
            for ((o, e), q) in row.iter_mut().zip(self.embedding.row(t)).zip(self.position.row(p)) {
                *o = e + q;
            }
        }
        let att = attention_forward(&x, &self.wq, &self.wk, &self.wv, false)?;
        let rows = matmul(&att.z, &self.wo)?;
        Ok(TextCache {
            tokens: tokens.to_vec(),
            att: Some(att),
            out: Encoded::from_rows(rows),
        })
    }

    /// `d_rows` is the gradient on the output rows with any pooled gradient
    /// already folded in (see [`spread_pooled`]).
    pub fn backward(&self, cache: &TextCache, d_rows: &Tensor, g: &mut TextEncoder) -> Result<()> {
        let Some(att) = &cache.att else {
            for (o, v) in g.empty.data_mut().iter_mut().zip(d_rows.row(0)) {
                *o += v;
            }
            return Ok(());
        };
        matmul_at_acc(&mut g.wo, &att.z, d_rows)?;
        let dz = matmul_bt(d_rows, &self.wo)?;
        let dx = attention_backward(att, &dz, &self.wq, &self.wk, &self.wv, &mut g.wq, &mut g.wk, &mut g.wv)?;
        for (p, &t) in cache.tokens.iter().enumerate() {
            for (o, v) in g.embedding.row_mut(t).iter_mut().zip(dx.row(p)) {
                *o += v;
            }
            for (o, v) in g.position.row_mut(p).iter_mut().zip(dx.row(p)) {
                *o += v;
            }
        }
        Ok(())
    }
}

/// Mean of category embeddings. Ids may repeat (a multiset), in which case
/// each occurrence counts.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalEncoder {
    pub table: Tensor,
}
crate::impl_params!(CategoricalEncoder { table });

#[derive(Clone, Debug)]
pub struct CategoricalCache {
    ids: Vec<usize>,
    pub out: Encoded,
}

impl CategoricalEncoder {
    pub fn new(n_categories: usize, d: usize, rng: &mut Rng) -> Self {
        CategoricalEncoder {
            table: Tensor::uniform(&[n_categories, d], 1.0 / (d as f64).sqrt(), rng),
        }
    }

    pub fn forward(&self, ids: &[usize]) -> Result<CategoricalCache> {
        let d = self.table.cols();
        if let Some(&c) = ids.iter().find(|&&c| c >= self.table.rows()) {
            return Err(Error::invalid(format!("unknown category id {c}")));
        }
        if ids.is_empty() {
            return Ok(CategoricalCache {
                ids: Vec::new(),
                out: Encoded {
                    rows: Tensor::zeros(&[0, d]),
                    pooled: vec![0.0; d],
                },
            });
        }
        let rows: Vec<Vec<f64>> = ids.iter().map(|&c| self.table.row(c).to_vec()).collect();
        Ok(CategoricalCache {
            ids: ids.to_vec(),
            out: Encoded::from_rows(Tensor::from_rows(&rows, d)?),
        })
    }

    pub fn backward(&self, cache: &CategoricalCache, d_rows: &Tensor, g: &mut CategoricalEncoder) {
        for (r, &c) in cache.ids.iter().enumerate() {
            for (o, v) in g.table.row_mut(c).iter_mut().zip(d_rows.row(r)) {
                *o += v;
            }
        }
    }
}

/// Two-layer perceptron `tanh(x W1 + b1) W2 + b2`; one output row.
#[derive(Clone, Debug, PartialEq)]
pub struct NumericEncoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}
crate::impl_params!(NumericEncoder { w1, b1, w2, b2 });

#[derive(Clone, Debug)]
pub struct NumericCache {
    x: Vec<f64>,
    hidden: Vec<f64>,
    pub out: Encoded,
}

impl NumericEncoder {
    pub fn new(input_dim: usize, d: usize, rng: &mut Rng) -> Self {
        NumericEncoder {
            w1: Tensor::fan_in_uniform(&[input_dim, d], rng),
            b1: Tensor::zeros(&[d]),
            w2: Tensor::fan_in_uniform(&[d, d], rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<NumericCache> {
        let mut hidden = vec_mat(x, &self.w1)?;
        for (h, b) in hidden.iter_mut().zip(self.b1.data()) {
            *h = (*h + b).tanh();
        }
        let mut y = vec_mat(&hidden, &self.w2)?;
        for (o, b) in y.iter_mut().zip(self.b2.data()) {
            *o += b;
        }
        let d = y.len();
        Ok(NumericCache {
            x: x.to_vec(),
            hidden,
            out: Encoded {
                rows: Tensor::from_rows(&[y.clone()], d)?,
                pooled: y,
            },
        })
    }

    pub fn backward(&self, cache: &NumericCache, d_rows: &Tensor, g: &mut NumericEncoder) -> Result<()> {
        let dy = d_rows.row(0);
        outer_acc(&mut g.w2, &cache.hidden, dy)?;
        for (o, v) in g.b2.data_mut().iter_mut().zip(dy) {
            *o += v;
        }
        let dh = crate::numerics::tensor::mat_vec(&self.w2, dy)?;
        let dpre: Vec<f64> = dh
            .iter()
            .zip(&cache.hidden)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        outer_acc(&mut g.w1, &cache.x, &dpre)?;
        for (o, v) in g.b1.data_mut().iter_mut().zip(&dpre) {
            *o += v;
        }
        Ok(())
    }
}
