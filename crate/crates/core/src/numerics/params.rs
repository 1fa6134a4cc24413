//! Named parameter trees.
//!
//! Every learnable structure implements [`Params`], which walks its tensors
//! in a fixed order under dotted identifiers such as
//! `generator.blocks.0.wq`. Gradients, momentum buffers, Fisher diagonals and
//! anchors reuse the parameter struct itself, so they share identifiers and
//! shapes by construction.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Tensor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(prefix.to_string(), self)
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(prefix.to_string(), self)
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Params> Params for Option<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

/// Implements [`Params`] for a struct by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_params {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::numerics::Params for $ty {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a $crate::numerics::Tensor),
            ) {
                $( $crate::numerics::Params::visit(
                    &self.$field,
                    &$crate::numerics::params::join(prefix, stringify!($field)),
                    f,
                ); )*
            }
            fn visit_mut<'a>(
                &'a mut self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a mut $crate::numerics::Tensor),
            ) {
                $( $crate::numerics::Params::visit_mut(
                    &mut self.$field,
                    &$crate::numerics::params::join(prefix, stringify!($field)),
                    f,
                ); )*
            }
        }
    };
}

/// Convenience operations available on every parameter tree.
pub trait ParamSet: Params {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, t| out.push((n, t)));
        out
    }

    fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.named_mut().into_iter().map(|(_, t)| t).collect()
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "flat vector of {} for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    fn fill(&mut self, v: f64) {
        for t in self.tensors_mut() {
            t.fill(v);
        }
    }

    /// `self += alpha * other`, tensor by tensor.
    fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()>
    where
        Self: Sized,
    {
        let others = other.tensors();
        let mine = self.tensors_mut();
        if mine.len() != others.len() {
            return Err(Error::shape("parameter trees differ in tensor count"));
        }
        for (a, b) in mine.into_iter().zip(others) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    fn same_layout(&self, other: &Self) -> bool
    where
        Self: Sized,
    {
        let a = self.named();
        let b = other.named();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }
}

impl<T: Params> ParamSet for T {}
