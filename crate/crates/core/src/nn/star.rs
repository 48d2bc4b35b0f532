//! Star Block: the element-wise product of two linear branches.
//!
//! Following StarNet: depthwise 7×7 + BN, two 1×1 expansions (ratio 4),
//! `ReLU6(f1) ⊙ f2`, 1×1 projection + BN, depthwise 7×7, residual add.

use super::layers::{BatchNorm, Conv2d, DwConv};
use super::params::impl_params;
use super::{run_inference, Init};
use crate::error::dim_err;
use crate::{Graph, Result, Scalar, Tensor, Var};

/// `(w1ᵀy)·(w2ᵀy)` for augmented vectors whose last entry carries the bias.
pub fn star_op<T: Scalar>(y: &Tensor<T>, w1: &Tensor<T>, w2: &Tensor<T>) -> Result<T> {
    check_lengths(y, w1, w2)?;
    let dot = |w: &Tensor<T>| y.data().iter().zip(w.data()).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    Ok(dot(w1) * dot(w2))
}

/// The same value as the double sum `Σ_i Σ_{j≥i} γ(i,j)·yⁱ·yʲ` where
/// `γ(i,i) = w1ⁱw2ⁱ` and `γ(i,j) = w1ⁱw2ʲ + w1ʲw2ⁱ` for `i ≠ j`.
pub fn star_op_pairwise<T: Scalar>(y: &Tensor<T>, w1: &Tensor<T>, w2: &Tensor<T>) -> Result<T> {
    check_lengths(y, w1, w2)?;
    let (y, a, b) = (y.data(), w1.data(), w2.data());
    let mut s = T::zero();
    for i in 0..y.len() {
        for j in i..y.len() {
            let gamma = if i == j { a[i] * b[i] } else { a[i] * b[j] + a[j] * b[i] };
            s += gamma * y[i] * y[j];
        }
    }
    Ok(s)
}

fn check_lengths<T: Scalar>(y: &Tensor<T>, w1: &Tensor<T>, w2: &Tensor<T>) -> Result<()> {
    if y.rank() != 1 || y.shape() != w1.shape() || y.shape() != w2.shape() {
        return Err(dim_err!(
            "star_op needs three vectors of equal length, got {:?}, {:?}, {:?}",
            y.shape(),
            w1.shape(),
            w2.shape()
        ));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct StarBlock<T: Scalar> {
    pub dwconv: DwConv<T>,
    pub dw_bn: BatchNorm<T>,
    pub f1: Conv2d<T>,
    pub f2: Conv2d<T>,
    pub g: Conv2d<T>,
    pub g_bn: BatchNorm<T>,
    pub dwconv2: DwConv<T>,
}
impl_params!(StarBlock { dwconv, dw_bn, f1, f2, g, g_bn, dwconv2 });

impl<T: Scalar> StarBlock<T> {
    pub const KERNEL: usize = 7;
    pub const EXPANSION: usize = 4;
    pub const BN_EPS: f64 = 1e-5;

    pub fn new(init: &mut Init, channels: usize) -> Self {
        let (c, e) = (channels, channels * Self::EXPANSION);
        Self {
            dwconv: DwConv::new(init, c, Self::KERNEL),
            dw_bn: BatchNorm::identity(c, Self::BN_EPS),
            f1: Conv2d::new(init, c, e, 1, 1, true),
            f2: Conv2d::new(init, c, e, 1, 1, true),
            g: Conv2d::new(init, e, c, 1, 1, true),
            g_bn: BatchNorm::identity(c, Self::BN_EPS),
            dwconv2: DwConv::new(init, c, Self::KERNEL),
        }
    }

    pub fn channels(&self) -> usize {
        self.f1.c_in()
    }

    /// Row `e` of `f1` and `f2` as `(d+1)`-vectors with the bias as the last entry.
    pub fn augmented_weights(&self, e: usize) -> (Tensor<T>, Tensor<T>) {
        let aug = |conv: &Conv2d<T>| {
            let d = conv.c_in();
            let bias = conv.bias.as_ref().map_or(T::zero(), |b| b.data()[e]);
            Tensor::from_fn(&[d + 1], |i| if i < d { conv.weight.data()[e * d + i] } else { bias })
        };
        (aug(&self.f1), aug(&self.f2))
    }

    /// `ReLU6(f1(z)) ⊙ f2(z)` on the already depthwise-filtered map `z`.
    pub fn star_term(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let a = self.f1.forward(g, z)?;
        let a = g.relu6(a);
        let b = self.f2.forward(g, z)?;
        g.mul(a, b)
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let c = g.shape(x).first().copied().unwrap_or(0);
        if g.shape(x).len() != 3 || c != self.channels() {
            return Err(dim_err!("star block has {} channels, input is {:?}", self.channels(), g.shape(x)));
        }
        let z = self.dwconv.forward(g, x)?;
        let z = self.dw_bn.forward(g, z)?;
        let s = self.star_term(g, z)?;
        let y = self.g.forward(g, s)?;
        let y = self.g_bn.forward(g, y)?;
        let y = self.dwconv2.forward(g, y)?;
        g.add(x, y)
    }
}

pub fn star_block_forward<T: Scalar>(x: &Tensor<T>, p: &StarBlock<T>) -> Result<Tensor<T>> {
    run_inference(x, |g, x| p.forward(g, x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[values.len()], values).unwrap()
    }

    #[test]
    fn star_op_examples() {
        let z = v(&[0.0, 0.0, 0.0]);
        assert_eq!(star_op(&z, &v(&[1.0, 2.0, 3.0]), &v(&[4.0, 5.0, 6.0])).unwrap(), 0.0);
        let y = v(&[3.0, 4.0, 1.0]);
        assert_eq!(star_op(&y, &v(&[1.0, 0.0, 0.0]), &v(&[0.0, 1.0, 0.0])).unwrap(), 12.0);
        assert_eq!(star_op_pairwise(&y, &v(&[1.0, 0.0, 0.0]), &v(&[0.0, 1.0, 0.0])).unwrap(), 12.0);
    }

    #[test]
    fn star_op_length_mismatch() {
        let err = star_op(&v(&[1.0, 1.0]), &v(&[1.0]), &v(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, crate::Error::Dimension(_)));
    }

    #[test]
    fn zero_expansion_is_identity() {
        let mut b = StarBlock::<f64>::new(&mut Init::new(1), 2);
        b.f1.weight = Tensor::zeros(b.f1.weight.shape());
        let x = Tensor::from_fn(&[2, 5, 5], |i| (i as f64).sin());
        assert_eq!(star_block_forward(&x, &b).unwrap(), x);
    }

    #[test]
    fn channel_mismatch() {
        let b = StarBlock::<f32>::new(&mut Init::new(1), 4);
        let err = star_block_forward(&Tensor::zeros(&[3, 4, 4]), &b).unwrap_err();
        assert!(matches!(err, crate::Error::Dimension(_)));
    }
}
