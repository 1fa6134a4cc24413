use serde::{Deserialize, Serialize};

use super::rng::Rng;
use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
///
/// One- and two-dimensional tensors cover everything in this crate; a 1-D
/// tensor of length `n` behaves as a `1 × n` row when used in a product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite tensor value {bad}")));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(&[rows, cols], data)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` with `fan_in = shape[0]`.
    pub fn fan_in_uniform(shape: &[usize], rng: &mut Rng) -> Self {
        let fan_in = shape.first().copied().unwrap_or(1).max(1);
        Self::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => self.data.len(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "axpy {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Stack equal-length rows into a matrix.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape(format!("row of length {} in {cols}-column stack", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }
}

/// `a (m×k) · b (k×n)`
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_bt {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `acc += aᵀ · b` with `a` m×k and `b` m×n, `acc` k×n.
pub fn matmul_at_acc(acc: &mut Tensor, a: &Tensor, b: &Tensor) -> Result<()> {
    let (m, k) = (a.rows(), a.cols());
    let (m2, n) = (b.rows(), b.cols());
    if m != m2 || acc.rows() != k || acc.cols() != n {
        return Err(Error::shape(format!(
            "matmul_at_acc {:?} += {:?}ᵀ x {:?}",
            acc.shape(),
            a.shape(),
            b.shape()
        )));
    }
    for r in 0..m {
        let arow = &a.data[r * k..(r + 1) * k];
        let brow = &b.data[r * n..(r + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let accrow = &mut acc.data[p * n..(p + 1) * n];
            for (o, &bv) in accrow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(())
}

/// Row vector times matrix: `x (k) · w (k×n) -> n`.
pub fn vec_mat(x: &[f64], w: &Tensor) -> Result<Vec<f64>> {
    let (k, n) = (w.rows(), w.cols());
    if x.len() != k {
        return Err(Error::shape(format!(
            "vec_mat len {} x {:?}",
            x.len(),
            w.shape()
        )));
    }
    let mut out = vec![0.0; n];
    for (p, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let wrow = &w.data[p * n..(p + 1) * n];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += xv * wv;
        }
    }
    Ok(out)
}

/// Matrix times column vector: `w (k×n) · y (n) -> k`. This is the input
/// gradient of [`vec_mat`].
pub fn mat_vec(w: &Tensor, y: &[f64]) -> Result<Vec<f64>> {
    let (k, n) = (w.rows(), w.cols());
    if y.len() != n {
        return Err(Error::shape(format!(
            "mat_vec {:?} x len {}",
            w.shape(),
            y.len()
        )));
    }
    Ok((0..k).map(|p| dot(&w.data[p * n..(p + 1) * n], y)).collect())
}

/// `acc += x ⊗ y`
pub fn outer_acc(acc: &mut Tensor, x: &[f64], y: &[f64]) -> Result<()> {
    if acc.rows() != x.len() || acc.cols() != y.len() {
        return Err(Error::shape(format!(
            "outer {:?} += {} x {}",
            acc.shape(),
            x.len(),
            y.len()
        )));
    }
    let n = y.len();
    for (p, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, &yv) in acc.data[p * n..(p + 1) * n].iter_mut().zip(y) {
            *o += xv * yv;
        }
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn add_assign(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

pub fn scale_add(acc: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

pub fn mean_rows(rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    if rows.is_empty() {
        return out;
    }
    for r in rows {
        add_assign(&mut out, r);
    }
    let n = rows.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}
