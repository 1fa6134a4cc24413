//! Adaptive weighted fusion: a softmax over per-modality scores mixes the
//! modality vectors, and a gated perceptron over their concatenation adds a
//! residual term.

use crate::error::{Error, Result};
use crate::numerics::tensor::{dot, mat_vec, outer_acc, vec_mat};
use crate::numerics::{softmax, softmax_backward, Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    /// One score vector per modality, as rows.
    pub score: Tensor,
    /// Residual gate.
    pub beta: Tensor,
    /// Perceptron over the concatenated modality vectors.
    pub w: Tensor,
    pub b: Tensor,
}
crate::impl_params!(FusionParams { score, beta, w, b });

#[derive(Clone, Debug, PartialEq)]
pub struct FusionCache {
    pub alpha: Vec<f64>,
    concat: Vec<f64>,
    /// `tanh(concat W + b)`
    gate_out: Vec<f64>,
    pub fused: Vec<f64>,
}

impl FusionParams {
    pub fn new(modalities: usize, d: usize, rng: &mut Rng) -> Self {
        FusionParams {
            score: Tensor::fan_in_uniform(&[modalities, d], rng),
            beta: Tensor::vector(vec![0.1]),
            w: Tensor::fan_in_uniform(&[modalities * d, d], rng),
            b: Tensor::zeros(&[d]),
        }
    }

    pub fn modalities(&self) -> usize {
        self.score.rows()
    }

    fn check(&self, hs: &[Vec<f64>]) -> Result<()> {
        if hs.len() != self.modalities() {
            return Err(Error::shape(format!(
                "{} modality vectors for {} fusion slots",
                hs.len(),
                self.modalities()
            )));
        }
        if hs.iter().any(|h| h.len() != self.score.cols()) {
            return Err(Error::shape("modality vector width"));
        }
        Ok(())
    }
}

/// `softmax_m(w_m · h_m)`.
pub fn fusion_weights(hs: &[Vec<f64>], p: &FusionParams) -> Result<Vec<f64>> {
    p.check(hs)?;
    let scores: Vec<f64> = hs.iter().enumerate().map(|(m, h)| dot(p.score.row(m), h)).collect();
    softmax(&scores)
}

/// `Σ α_m h_m + β · tanh([h_1; …; h_M] W + b)`.
pub fn fuse(hs: &[Vec<f64>], alpha: &[f64], p: &FusionParams) -> Result<Vec<f64>> {
    Ok(fuse_with(hs, alpha.to_vec(), p)?.fused)
}

fn fuse_with(hs: &[Vec<f64>], alpha: Vec<f64>, p: &FusionParams) -> Result<FusionCache> {
    p.check(hs)?;
    if alpha.len() != hs.len() {
        return Err(Error::shape("fusion weights and modalities differ in count"));
    }
    let concat: Vec<f64> = hs.iter().flatten().copied().collect();
    let mut gate_out = vec_mat(&concat, &p.w)?;
    for (g, b) in gate_out.iter_mut().zip(p.b.data()) {
        *g = (*g + b).tanh();
    }
    let beta = p.beta.data()[0];
    let mut fused: Vec<f64> = gate_out.iter().map(|g| beta * g).collect();
    for (a, h) in alpha.iter().zip(hs) {
        for (f, v) in fused.iter_mut().zip(h) {
            *f += a * v;
        }
    }
    Ok(FusionCache {
        alpha,
        concat,
        gate_out,
        fused,
    })
}

/// Fusion weights and fused vector in one pass, keeping what backward needs.
pub fn fusion_forward(hs: &[Vec<f64>], p: &FusionParams) -> Result<FusionCache> {
    let alpha = fusion_weights(hs, p)?;
    fuse_with(hs, alpha, p)
}

/// Accumulates parameter gradients; returns `dL/dh_m` per modality.
pub fn fusion_backward(
    hs: &[Vec<f64>],
    cache: &FusionCache,
    d_fused: &[f64],
    p: &FusionParams,
    g: &mut FusionParams,
) -> Result<Vec<Vec<f64>>> {
    let d = p.score.cols();
    let beta = p.beta.data()[0];
    let mut dh: Vec<Vec<f64>> = cache
        .alpha
        .iter()
        .map(|a| d_fused.iter().map(|v| a * v).collect())
        .collect();

    g.beta.data_mut()[0] += dot(&cache.gate_out, d_fused);
    let dpre: Vec<f64> = cache
        .gate_out
        .iter()
        .zip(d_fused)
        .map(|(y, v)| beta * v * (1.0 - y * y))
        .collect();
    outer_acc(&mut g.w, &cache.concat, &dpre)?;
    for (o, v) in g.b.data_mut().iter_mut().zip(&dpre) {
        *o += v;
    }
    let dconcat = mat_vec(&p.w, &dpre)?;
    for (m, dm) in dh.iter_mut().enumerate() {
        for (o, v) in dm.iter_mut().zip(&dconcat[m * d..(m + 1) * d]) {
            *o += v;
        }
    }

    let dalpha: Vec<f64> = hs.iter().map(|h| dot(h, d_fused)).collect();
    let dscore = softmax_backward(&cache.alpha, &dalpha);
    for (m, ds) in dscore.iter().enumerate() {
        for (o, v) in g.score.row_mut(m).iter_mut().zip(&hs[m]) {
            *o += ds * v;
        }
        for (o, w) in dh[m].iter_mut().zip(p.score.row(m)) {
            *o += ds * w;
        }
    }
    Ok(dh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error, ParamSet};
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn params(m: usize, d: usize, seed: u64) -> FusionParams {
        FusionParams::new(m, d, &mut Rng::new(seed))
    }

    #[test]
    fn equal_scores_give_uniform_weights() {
        let mut p = params(3, 2, 1);
        p.score.fill(0.0);
        let a = fusion_weights(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]], &p).unwrap();
        for v in a {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_modality_weight_is_one() {
        let p = params(1, 3, 2);
        assert_eq!(fusion_weights(&[vec![0.1, 0.2, 0.3]], &p).unwrap(), vec![1.0]);
    }

    #[test]
    fn hand_scores_zero_and_ln3() {
        let mut p = params(2, 1, 3);
        p.score = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let a = fusion_weights(&[vec![0.0], vec![3f64.ln()]], &p).unwrap();
        assert!((a[0] - 0.25).abs() < 1e-15 && (a[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_gate_selects_modality() {
        let mut p = params(2, 2, 4);
        p.beta.fill(0.0);
        let hs = [vec![1.0, -1.0], vec![4.0, 5.0]];
        assert_eq!(fuse(&hs, &[0.0, 1.0], &p).unwrap(), vec![4.0, 5.0]);
        let same = [vec![0.5, 0.25], vec![0.5, 0.25]];
        let out = fuse(&same, &[0.3, 0.7], &p).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-15 && (out[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn hand_perceptron_two_modalities() {
        let p = FusionParams {
            score: Tensor::zeros(&[2, 2]),
            beta: Tensor::vector(vec![0.5]),
            w: Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap(),
            b: Tensor::vector(vec![0.0, 0.1]),
        };
        let hs = [vec![0.2, 0.4], vec![0.6, -0.2]];
        let out = fuse(&hs, &[0.5, 0.5], &p).unwrap();
        let expect = [
            0.5 * 0.2 + 0.5 * 0.6 + 0.5 * (0.2f64 + 0.6).tanh(),
            0.5 * 0.4 + 0.5 * -0.2 + 0.5 * (0.4f64 - 0.2 + 0.1).tanh(),
        ];
        assert!((out[0] - expect[0]).abs() < 1e-15);
        assert!((out[1] - expect[1]).abs() < 1e-15);
    }

    #[test]
    fn count_mismatch_is_error() {
        let p = params(3, 2, 5);
        assert!(fusion_weights(&[vec![0.0, 0.0]], &p).is_err());
        assert!(fuse(&vec![vec![0.0, 0.0]; 3], &[1.0], &p).is_err());
    }

    #[test]
    fn gradients_match_fd() {
        #[derive(Clone)]
        struct P {
            h: Tensor,
            f: FusionParams,
        }
        crate::impl_params!(P { h, f });
        let mut rng = Rng::new(7);
        let p = P {
            h: Tensor::uniform(&[3, 4], 1.0, &mut rng),
            f: FusionParams::new(3, 4, &mut rng),
        };
        let w = [0.2, -0.9, 1.3, 0.5];
        let hs = |t: &Tensor| (0..3).map(|m| t.row(m).to_vec()).collect::<Vec<_>>();
        let c = fusion_forward(&hs(&p.h), &p.f).unwrap();
        let mut g = p.zeroed();
        let dh = fusion_backward(&hs(&p.h), &c, &w, &p.f, &mut g.f).unwrap();
        g.h = Tensor::from_rows(&dh, 4).unwrap();
        let f = |flat: &[f64]| {
            let mut s = p.clone();
            s.assign_flat(flat).unwrap();
            dot(&fusion_forward(&hs(&s.h), &s.f).unwrap().fused, &w)
        };
        let num = finite_diff_grad(f, &p.flatten(), 1e-5).unwrap();
        assert!(max_relative_error(&g.flatten(), &num, 1e-7) < 1e-6);
    }

    proptest! {
        #[test]
        fn weights_form_distribution(vals in prop::collection::vec(-10.0f64..10.0, 6), seed in 0u64..100) {
            let p = params(3, 2, seed);
            let hs: Vec<Vec<f64>> = vals.chunks(2).map(|c| c.to_vec()).collect();
            let a = fusion_weights(&hs, &p).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn permuting_modalities_is_consistent(vals in prop::collection::vec(-2.0f64..2.0, 6), seed in 0u64..100) {
            // Swap modality 0 and 2: permute vectors, score rows and concat blocks.
            let d = 2;
            let p = params(3, d, seed);
            let hs: Vec<Vec<f64>> = vals.chunks(d).map(|c| c.to_vec()).collect();
            let perm = [2usize, 1, 0];
            let hs2: Vec<Vec<f64>> = perm.iter().map(|&m| hs[m].clone()).collect();
            let mut p2 = p.clone();
            for (new, &old) in perm.iter().enumerate() {
                p2.score.row_mut(new).copy_from_slice(p.score.row(old));
                for r in 0..d {
                    p2.w.row_mut(new * d + r).copy_from_slice(p.w.row(old * d + r));
                }
            }
            let a = fusion_forward(&hs, &p).unwrap().fused;
            let b = fusion_forward(&hs2, &p2).unwrap().fused;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
