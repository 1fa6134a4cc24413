//! Hand-derived forward/backward pairs shared by the encoders and the decoder.

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul, matmul_at_acc, matmul_bt};
use crate::numerics::{softmax_backward, softmax_unchecked, Tensor};

/// Cached activations of one single-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    /// Query-side input rows.
    pub xq: Tensor,
    /// Key/value-side input rows.
    pub xkv: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Attention weights, one row per query.
    pub a: Tensor,
    /// `a · v`
    pub z: Tensor,
}

/// Gradients with respect to the two attention inputs.
#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub dxq: Tensor,
    pub dxkv: Tensor,
}

/// `softmax(Xq Wq (Xkv Wk)ᵀ / sqrt(dk)) · Xkv Wv`, optionally causal (query
/// row `i` sees key rows `0..=i`).
pub fn cross_attention_forward(
    xq: &Tensor,
    xkv: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    causal: bool,
) -> Result<AttentionCache> {
    let dk = wq.cols();
    if dk == 0 {
        return Err(Error::invalid("attention key dimension is zero"));
    }
    if wk.cols() != dk {
        return Err(Error::shape("query and key projections differ in width"));
    }
    if xkv.rows() == 0 {
        return Err(Error::invalid("attention over zero keys"));
    }
    let q = matmul(xq, wq)?;
    let k = matmul(xkv, wk)?;
    let v = matmul(xkv, wv)?;
    let mut s = matmul_bt(&q, &k)?;
    let (nq, nk) = (xq.rows(), xkv.rows());
    let scale = 1.0 / (dk as f64).sqrt();
    let mut a = Tensor::zeros(&[nq, nk]);
    for i in 0..nq {
        let row = s.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = if causal && j > i {
                f64::NEG_INFINITY
            } else {
                *v * scale
            };
        }
        a.row_mut(i).copy_from_slice(&softmax_unchecked(row));
    }
    let z = matmul(&a, &v)?;
    Ok(AttentionCache {
        xq: xq.clone(),
        xkv: xkv.clone(),
        q,
        k,
        v,
        a,
        z,
    })
}

/// Self-attention: queries, keys and values all come from `x`.
pub fn attention_forward(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    causal: bool,
) -> Result<AttentionCache> {
    cross_attention_forward(x, x, wq, wk, wv, causal)
}

/// Accumulates projection gradients and returns the input gradients.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_backward(
    cache: &AttentionCache,
    dz: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    gq: &mut Tensor,
    gk: &mut Tensor,
    gv: &mut Tensor,
) -> Result<AttentionGrads> {
    let (nq, nk) = (cache.xq.rows(), cache.xkv.rows());
    let scale = 1.0 / (wq.cols() as f64).sqrt();
    let da = matmul_bt(dz, &cache.v)?;
    let mut dv = Tensor::zeros(cache.v.shape());
    matmul_at_acc(&mut dv, &cache.a, dz)?;
    let mut ds = Tensor::zeros(&[nq, nk]);
    for i in 0..nq {
        let g = softmax_backward(cache.a.row(i), da.row(i));
        for (o, gv) in ds.row_mut(i).iter_mut().zip(g) {
            *o = gv * scale;
        }
    }
    let dq = matmul(&ds, &cache.k)?;
    let mut dkm = Tensor::zeros(cache.k.shape());
    matmul_at_acc(&mut dkm, &ds, &cache.q)?;
    matmul_at_acc(gq, &cache.xq, &dq)?;
    matmul_at_acc(gk, &cache.xkv, &dkm)?;
    matmul_at_acc(gv, &cache.xkv, &dv)?;
    let dxq = matmul_bt(&dq, wq)?;
    let mut dxkv = matmul_bt(&dkm, wk)?;
    dxkv.axpy(1.0, &matmul_bt(&dv, wv)?)?;
    Ok(AttentionGrads { dxq, dxkv })
}

/// Backward of [`attention_forward`]; returns `dL/dX`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    cache: &AttentionCache,
    dz: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    gq: &mut Tensor,
    gk: &mut Tensor,
    gv: &mut Tensor,
) -> Result<Tensor> {
    let g = cross_attention_backward(cache, dz, wq, wk, wv, gq, gk, gv)?;
    let mut dx = g.dxq;
    dx.axpy(1.0, &g.dxkv)?;
    Ok(dx)
}

/// `X W + b` (bias broadcast over rows).
pub fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut y = matmul(x, w)?;
    if let Some(b) = b {
        if b.len() != y.cols() {
            return Err(Error::shape("bias width"));
        }
        for r in 0..y.rows() {
            for (o, bv) in y.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Ok(y)
}

/// Accumulates `dW`, `db` and returns `dX` for [`linear_forward`].
pub fn linear_backward(
    x: &Tensor,
    dy: &Tensor,
    w: &Tensor,
    gw: &mut Tensor,
    gb: Option<&mut Tensor>,
) -> Result<Tensor> {
    matmul_at_acc(gw, x, dy)?;
    if let Some(gb) = gb {
        for r in 0..dy.rows() {
            for (o, d) in gb.data_mut().iter_mut().zip(dy.row(r)) {
                *o += d;
            }
        }
    }
    matmul_bt(dy, w)
}

pub fn tanh_inplace(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.tanh());
}

/// Given `y = tanh(u)` and `dL/dy`, returns `dL/du`.
pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(y, d)| d * (1.0 - y * y))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}
