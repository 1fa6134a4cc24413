//! Dense linear algebra, stable softmax, cosine similarity, seeded
//! initialization and the central-difference gradient oracle.

pub mod params;
pub mod rng;
pub mod tensor;

pub use params::{ParamSet, Params};
pub use rng::Rng;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Softmax with max subtraction.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("softmax input not finite".into()));
    }
    Ok(softmax_unchecked(v))
}

/// Softmax for a vector already known to be nonempty. Entries equal to
/// `-inf` receive probability exactly zero.
pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    out
}

/// Backward pass of softmax: given `p = softmax(s)` and `dL/dp`, returns `dL/ds`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}

/// `log Σ exp(v)` computed stably. `-inf` entries are ignored.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cosine similarity; zero-norm input is an error.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = tensor::norm(a);
    let nb = tensor::norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((tensor::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Central finite-difference gradient of `f` at `theta`.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut x = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        let orig = x[j];
        x[j] = orig + h;
        let plus = f(&x);
        x[j] = orig - h;
        let minus = f(&x);
        x[j] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerical(format!(
                "objective not finite at coordinate {j}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest per-coordinate relative error between two gradients. Coordinates
/// whose magnitude is below `floor` in both vectors are compared against
/// `floor` instead, so that round-off in near-zero entries is not amplified.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
