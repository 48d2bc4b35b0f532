//! Efficient Multi-Scale Attention with channel grouping.
//!
//! Channels are split into `G` groups that share one set of weights. Per group:
//! a pooled branch (H- and W-strips through a shared 1×1 conv, sigmoid gates,
//! per-channel normalization) and a 3×3 local branch; each branch's softmaxed
//! channel descriptor weights the other branch's spatial map, and the summed
//! map gates the group input through a sigmoid.

use super::layers::Conv2d;
use super::params::impl_params;
use super::{run_inference, Init};
use crate::error::{config_err, dim_err};
use crate::tensor::ops::Axis;
use crate::{Graph, Result, Scalar, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Ema<T: Scalar> {
    pub groups: usize,
    pub conv1x1: Conv2d<T>,
    pub conv3x3: Conv2d<T>,
    pub gn_weight: Tensor<T>,
    pub gn_bias: Tensor<T>,
    pub eps: f64,
}
impl_params!(Ema { conv1x1, conv3x3, gn_weight, gn_bias });

impl<T: Scalar> Ema<T> {
    pub const GROUPS: usize = 8;
    pub const GN_EPS: f64 = 1e-5;

    pub fn new(init: &mut Init, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(config_err!("EMA group count {groups} does not divide {channels} channels"));
        }
        let cg = channels / groups;
        Ok(Self {
            groups,
            conv1x1: Conv2d::new(init, cg, cg, 1, 1, true),
            conv3x3: Conv2d::new(init, cg, cg, 3, 1, true),
            gn_weight: Tensor::ones(&[cg]),
            gn_bias: Tensor::zeros(&[cg]),
            eps: Self::GN_EPS,
        })
    }

    pub fn group_channels(&self) -> usize {
        self.conv1x1.c_in()
    }

    /// Per-channel standardization over `H·W`, then the affine `γ, β`.
    fn norm(&self, g: &mut Graph<T>, x: Var, c: usize, h: usize, w: usize) -> Result<Var> {
        let flat = g.reshape(x, &[c, h * w])?;
        let mean = g.mean_axis(flat, 1)?;
        let centered = g.sub(flat, mean)?;
        let sq = g.square(centered);
        let var = g.mean_axis(sq, 1)?;
        let inv = g.rsqrt(var, self.eps);
        let y = g.mul(centered, inv)?;
        let gamma = g.param(&self.gn_weight);
        let gamma = g.reshape(gamma, &[c, 1])?;
        let beta = g.param(&self.gn_bias);
        let beta = g.reshape(beta, &[c, 1])?;
        let y = g.mul(y, gamma)?;
        let y = g.add(y, beta)?;
        g.reshape(y, &[c, h, w])
    }

    /// `softmax(gap(a))` as a `[1,c]` row times `b` flattened to `[c, H·W]`.
    fn cross(&self, g: &mut Graph<T>, a: Var, b: Var, c: usize, n: usize) -> Result<Var> {
        let pooled = g.global_avg_pool(a)?;
        let row = g.reshape(pooled, &[1, c])?;
        let attn = g.softmax(row, 1)?;
        let map = g.reshape(b, &[c, n])?;
        g.matmul(attn, map)
    }

    fn group_forward(&self, g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
        let c = self.group_channels();
        let x_h = g.avg_pool_axis(x, Axis::W)?;
        let x_w = g.avg_pool_axis(x, Axis::H)?;
        let x_w = g.reshape(x_w, &[c, w, 1])?;
        let strips = g.concat(&[x_h, x_w], 1)?;
        let hw = self.conv1x1.forward(g, strips)?;
        let gate_h = g.narrow(hw, 1, 0, h)?;
        let gate_h = g.sigmoid(gate_h);
        let gate_w = g.narrow(hw, 1, h, w)?;
        let gate_w = g.reshape(gate_w, &[c, 1, w])?;
        let gate_w = g.sigmoid(gate_w);
        let x1 = g.mul(x, gate_h)?;
        let x1 = g.mul(x1, gate_w)?;
        let x1 = self.norm(g, x1, c, h, w)?;
        let x2 = self.conv3x3.forward(g, x)?;

        let n = h * w;
        let a = self.cross(g, x1, x2, c, n)?;
        let b = self.cross(g, x2, x1, c, n)?;
        let weights = g.add(a, b)?;
        let weights = g.reshape(weights, &[1, h, w])?;
        let gate = g.sigmoid(weights);
        g.mul(x, gate)
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 {
            return Err(dim_err!("EMA expects [C,H,W], got {s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if self.groups == 0 || c % self.groups != 0 {
            return Err(config_err!("EMA group count {} does not divide {c} channels", self.groups));
        }
        let cg = c / self.groups;
        if cg != self.group_channels() {
            return Err(dim_err!("EMA built for {} channels per group, input gives {cg}", self.group_channels()));
        }
        let mut outs = Vec::with_capacity(self.groups);
        for i in 0..self.groups {
            let xi = g.narrow(x, 0, i * cg, cg)?;
            outs.push(self.group_forward(g, xi, h, w)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat(&outs, 0)
        }
    }
}

pub fn ema_forward<T: Scalar>(x: &Tensor<T>, p: &Ema<T>) -> Result<Tensor<T>> {
    run_inference(x, |g, x| p.forward(g, x))
}
