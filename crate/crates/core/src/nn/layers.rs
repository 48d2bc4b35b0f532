//! Standard YOLOv8 building blocks: ConvModule, C2f (CSPLayer_2Conv) and SPPF.

use super::params::impl_params;
use super::{run_inference, Init};
use crate::error::dim_err;
use crate::{Graph, Result, Scalar, Tensor, Var};

/// Inference-form batch norm: `γ·(x − μ)/√(σ² + eps) + β` per channel.
#[derive(Clone, Debug)]
pub struct BatchNorm<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
}
impl_params!(BatchNorm { weight, bias, running_mean, running_var });

impl<T: Scalar> BatchNorm<T> {
    /// The identity transform up to `eps`: γ = 1, β = 0, μ = 0, σ² = 1.
    pub fn identity(channels: usize, eps: f64) -> Self {
        Self {
            weight: Tensor::ones(&[channels]),
            bias: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.len()
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let c = self.channels();
        let col = [c, 1, 1];
        let w = g.param(&self.weight);
        let w = g.reshape(w, &col)?;
        let b = g.param(&self.bias);
        let b = g.reshape(b, &col)?;
        let m = g.param(&self.running_mean);
        let m = g.reshape(m, &col)?;
        let v = g.param(&self.running_var);
        let v = g.reshape(v, &col)?;
        let inv = g.rsqrt(v, self.eps);
        let scale = g.mul(w, inv)?;
        let ms = g.mul(m, scale)?;
        let shift = g.sub(b, ms)?;
        let y = g.mul(x, scale)?;
        g.add(y, shift)
    }
}

/// Full convolution with an optional per-output-channel bias.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub pad: usize,
}
impl_params!(Conv2d { weight, bias });

impl<T: Scalar> Conv2d<T> {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, k: usize, stride: usize, bias: bool) -> Self {
        Self {
            weight: init.he_uniform(&[c_out, c_in, k, k], c_in * k * k),
            bias: bias.then(|| Tensor::zeros(&[c_out])),
            stride,
            pad: k / 2,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        match &self.bias {
            Some(b) => {
                let b = g.param(b);
                let b = g.reshape(b, &[self.c_out(), 1, 1])?;
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Depthwise convolution with bias; weight `[C,k,k]`.
#[derive(Clone, Debug)]
pub struct DwConv<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}
impl_params!(DwConv { weight, bias });

impl<T: Scalar> DwConv<T> {
    pub fn new(init: &mut Init, channels: usize, k: usize) -> Self {
        Self { weight: init.he_uniform(&[channels, k, k], k * k), bias: Tensor::zeros(&[channels]), stride: 1, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let y = g.depthwise_conv2d(x, w, self.stride, self.pad)?;
        let b = g.param(&self.bias);
        let b = g.reshape(b, &[self.bias.len(), 1, 1])?;
        g.add(y, b)
    }
}

/// `SiLU(BN(conv(x)))` with a bias-free convolution and padding `k/2`.
#[derive(Clone, Debug)]
pub struct ConvModule<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}
impl_params!(ConvModule { conv, bn });

impl<T: Scalar> ConvModule<T> {
    pub const BN_EPS: f64 = 1e-3;

    pub fn new(init: &mut Init, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Self { conv: Conv2d::new(init, c_in, c_out, k, stride, false), bn: BatchNorm::identity(c_out, Self::BN_EPS) }
    }

    pub fn c_out(&self) -> usize {
        self.conv.c_out()
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.silu(y))
    }
}

pub fn conv_module_forward<T: Scalar>(x: &Tensor<T>, p: &ConvModule<T>) -> Result<Tensor<T>> {
    run_inference(x, |g, x| p.forward(g, x))
}

/// Two 3×3 ConvModules with an optional identity shortcut.
#[derive(Clone, Debug)]
pub struct Bottleneck<T: Scalar> {
    pub cv1: ConvModule<T>,
    pub cv2: ConvModule<T>,
    pub shortcut: bool,
}
impl_params!(Bottleneck { cv1, cv2 });

impl<T: Scalar> Bottleneck<T> {
    pub fn new(init: &mut Init, c: usize, shortcut: bool) -> Self {
        Self { cv1: ConvModule::new(init, c, c, 3, 1), cv2: ConvModule::new(init, c, c, 3, 1), shortcut }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.cv1.forward(g, x)?;
        let y = self.cv2.forward(g, y)?;
        if self.shortcut {
            g.add(x, y)
        } else {
            Ok(y)
        }
    }
}

/// CSPLayer_2Conv: `cv1` to `2c`, split in halves, chain `n` bottlenecks on the
/// second half keeping every intermediate, concatenate `(2 + n)·c` channels, `cv2`.
#[derive(Clone, Debug)]
pub struct C2f<T: Scalar> {
    pub cv1: ConvModule<T>,
    pub cv2: ConvModule<T>,
    pub m: Vec<Bottleneck<T>>,
}
impl_params!(C2f { cv1, cv2, m });

impl<T: Scalar> C2f<T> {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, n: usize, shortcut: bool) -> Self {
        let c = c_out / 2;
        Self {
            cv1: ConvModule::new(init, c_in, 2 * c, 1, 1),
            m: (0..n).map(|_| Bottleneck::new(init, c, shortcut)).collect(),
            cv2: ConvModule::new(init, (2 + n) * c, c_out, 1, 1),
        }
    }

    pub fn hidden(&self) -> usize {
        self.cv1.c_out() / 2
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let c = self.hidden();
        let y = self.cv1.forward(g, x)?;
        let mut parts = vec![g.narrow(y, 0, 0, c)?, g.narrow(y, 0, c, c)?];
        for b in &self.m {
            let last = *parts.last().expect("two halves");
            parts.push(b.forward(g, last)?);
        }
        let cat = g.concat(&parts, 0)?;
        self.cv2.forward(g, cat)
    }
}

pub fn c2f_forward<T: Scalar>(x: &Tensor<T>, p: &C2f<T>) -> Result<Tensor<T>> {
    run_inference(x, |g, x| p.forward(g, x))
}

/// Spatial pyramid pooling, fast form: three chained 5×5 max pools.
#[derive(Clone, Debug)]
pub struct Sppf<T: Scalar> {
    pub cv1: ConvModule<T>,
    pub cv2: ConvModule<T>,
}
impl_params!(Sppf { cv1, cv2 });

impl<T: Scalar> Sppf<T> {
    pub const POOL: usize = 5;

    pub fn new(init: &mut Init, c_in: usize, c_out: usize) -> Self {
        let c = c_in / 2;
        Self { cv1: ConvModule::new(init, c_in, c, 1, 1), cv2: ConvModule::new(init, 4 * c, c_out, 1, 1) }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(dim_err!("sppf expects [C,H,W], got {shape:?}"));
        }
        let k = Self::POOL;
        let y0 = self.cv1.forward(g, x)?;
        let y1 = g.max_pool2d(y0, k, 1, k / 2)?;
        let y2 = g.max_pool2d(y1, k, 1, k / 2)?;
        let y3 = g.max_pool2d(y2, k, 1, k / 2)?;
        let cat = g.concat(&[y0, y1, y2, y3], 0)?;
        self.cv2.forward(g, cat)
    }
}

pub fn sppf_forward<T: Scalar>(x: &Tensor<T>, p: &Sppf<T>) -> Result<Tensor<T>> {
    run_inference(x, |g, x| p.forward(g, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Params;
    use crate::rng::SplitMix64;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_| r.normal())
    }

    #[test]
    fn conv_module_identity_is_silu() {
        let mut cm = ConvModule::<f64>::new(&mut Init::new(0), 2, 2, 1, 1);
        cm.conv.weight = Tensor::zeros(&[2, 2, 1, 1]);
        cm.conv.weight.set(&[0, 0, 0, 0], 1.0);
        cm.conv.weight.set(&[1, 1, 0, 0], 1.0);
        cm.bn.eps = 0.0;
        let x = randn(&[2, 3, 3], 1);
        let y = conv_module_forward(&x, &cm).unwrap();
        assert!(y.max_abs_diff(&x.map(crate::tensor::ops::silu)) < 1e-15);
    }

    #[test]
    fn batchnorm_affine_form() {
        let mut bn = BatchNorm::<f64>::identity(1, 0.0);
        bn.weight = Tensor::full(&[1], 2.0);
        bn.bias = Tensor::full(&[1], 1.0);
        bn.running_mean = Tensor::full(&[1], 3.0);
        bn.running_var = Tensor::full(&[1], 4.0);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::full(&[1, 1, 1], 5.0));
        let y = bn.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[2.0 * (5.0 - 3.0) / 2.0 + 1.0]);
    }

    #[test]
    fn c2f_param_names() {
        let c = C2f::<f32>::new(&mut Init::new(0), 4, 4, 1, true);
        let mut names = Vec::new();
        c.visit("c2f", &mut |n, _| names.push(n));
        assert_eq!(names[0], "c2f.cv1.conv.weight");
        assert!(names.contains(&"c2f.m.0.cv2.bn.running_var".to_string()));
        // cv1 4·4 + cv2 (3·2)·4 + bottleneck 2·(2·2·9) + 3 BNs of 4 + 2 BNs of 2 (×4 tensors each)
        assert_eq!(c.param_count(), 16 + 24 + 72 + 4 * (4 + 4 + 2 + 2));
    }
}
