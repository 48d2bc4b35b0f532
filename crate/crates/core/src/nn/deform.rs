//! Deformable attention over a single feature map.
//!
//! Queries come from every grid cell. An offset network predicts one shift per
//! query (shared by all heads); keys and values are projected from features
//! bilinearly sampled at the shifted points. The block output is `x + attn(x)`.

use super::layers::{Conv2d, DwConv};
use super::params::impl_params;
use super::{run_inference, Init};
use crate::error::{config_err, dim_err};
use crate::{Graph, Result, Scalar, Tensor, Var};

#[derive(Clone, Debug)]
pub struct DeformAttn<T: Scalar> {
    pub heads: usize,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub offset_dw: DwConv<T>,
    pub offset_pw: Conv2d<T>,
    /// Maximum offset per axis, in grid cells.
    pub offset_scale: f64,
}
impl_params!(DeformAttn { w_q, w_k, w_v, w_o, offset_dw, offset_pw });

/// Cell-centre reference points `((2j+1)/W − 1, (2i+1)/H − 1)` as `[H·W, 2]`
/// rows of `(u, v)` in row-major order.
pub fn reference_grid<T: Scalar>(h: usize, w: usize) -> Result<Tensor<T>> {
    if h == 0 || w == 0 {
        return Err(dim_err!("reference grid needs positive extents, got {h}×{w}"));
    }
    let mut data = Vec::with_capacity(2 * h * w);
    for i in 0..h {
        for j in 0..w {
            data.push(T::lit((2 * j + 1) as f64 / w as f64 - 1.0));
            data.push(T::lit((2 * i + 1) as f64 / h as f64 - 1.0));
        }
    }
    Tensor::new(&[h * w, 2], data)
}

impl<T: Scalar> DeformAttn<T> {
    pub const OFFSET_KERNEL: usize = 5;
    pub const OFFSET_SCALE: f64 = 2.0;

    pub fn new(init: &mut Init, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(config_err!("{channels} channels cannot be split into {heads} heads"));
        }
        let mut proj = || init.he_uniform(&[channels, channels], channels);
        let (w_q, w_k, w_v, w_o) = (proj(), proj(), proj(), proj());
        Ok(Self {
            heads,
            w_q,
            w_k,
            w_v,
            w_o,
            offset_dw: DwConv::new(init, channels, Self::OFFSET_KERNEL),
            offset_pw: Conv2d::new(init, channels, 2, 1, 1, true),
            offset_scale: Self::OFFSET_SCALE,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }

    fn check(&self, c: usize) -> Result<()> {
        if self.heads == 0 || !self.channels().is_multiple_of(self.heads) {
            return Err(config_err!("{} channels cannot be split into {} heads", self.channels(), self.heads));
        }
        if c != self.channels() {
            return Err(dim_err!("deformable attention has {} channels, input has {c}", self.channels()));
        }
        Ok(())
    }

    /// `tokens · Wᵀ` for a `[N,C]` token matrix.
    fn project(&self, g: &mut Graph<T>, tokens: Var, w: &Tensor<T>) -> Result<Var> {
        let w = g.param(w);
        let wt = g.transpose(w)?;
        g.matmul(tokens, wt)
    }

    /// Eq 7–8 over projected `[N,C]` queries, keys and values: per-head
    /// `softmax(q kᵀ/√d) v`, heads concatenated, then `W_o`.
    pub fn attend(&self, g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
        let d = self.head_dim();
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        for m in 0..self.heads {
            let qm = g.narrow(q, 1, m * d, d)?;
            let km = g.narrow(k, 1, m * d, d)?;
            let vm = g.narrow(v, 1, m * d, d)?;
            let kt = g.transpose(km)?;
            let s = g.matmul(qm, kt)?;
            let s = g.scale(s, scale);
            let a = g.softmax(s, 1)?;
            heads.push(g.matmul(a, vm)?);
        }
        let h = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
        self.project(g, h, &self.w_o)
    }

    /// Plain multi-head self-attention over `[N,C]` tokens, no residual.
    pub fn mhsa(&self, g: &mut Graph<T>, tokens: Var) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        if s.len() != 2 {
            return Err(dim_err!("mhsa expects [N,C] tokens, got {s:?}"));
        }
        self.check(s[1])?;
        let q = self.project(g, tokens, &self.w_q)?;
        let k = self.project(g, tokens, &self.w_k)?;
        let v = self.project(g, tokens, &self.w_v)?;
        self.attend(g, q, k, v)
    }

    /// `[C,H,W]` query map to `[2,H,W]` offsets in cells, bounded by `±offset_scale`.
    pub fn offsets(&self, g: &mut Graph<T>, q_map: Var) -> Result<Var> {
        let y = self.offset_dw.forward(g, q_map)?;
        let y = g.gelu(y);
        let y = self.offset_pw.forward(g, y)?;
        let y = g.tanh(y);
        Ok(g.scale(y, T::lit(self.offset_scale)))
    }

    /// The attention branch alone, as `[C,H,W]`; the block adds `x` to this.
    pub fn core(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 {
            return Err(dim_err!("deformable attention expects [C,H,W], got {s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        self.check(c)?;
        let n = h * w;
        let flat = g.reshape(x, &[c, n])?;
        let tokens = g.transpose(flat)?;
        let q = self.project(g, tokens, &self.w_q)?;
        let qt = g.transpose(q)?;
        let q_map = g.reshape(qt, &[c, h, w])?;

        let off = self.offsets(g, q_map)?;
        let off = g.reshape(off, &[2, n])?;
        let off = g.transpose(off)?;
        let to_norm = g.constant(Tensor::new(&[1, 2], vec![T::lit(2.0 / w as f64), T::lit(2.0 / h as f64)])?);
        let off = g.mul(off, to_norm)?;
        let grid = g.constant(reference_grid(h, w)?);
        let points = g.add(grid, off)?;

        let sampled = g.bilinear_sample(x, points)?;
        let k = self.project(g, sampled, &self.w_k)?;
        let v = self.project(g, sampled, &self.w_v)?;
        let out = self.attend(g, q, k, v)?;
        let out = g.transpose(out)?;
        g.reshape(out, &[c, h, w])
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.core(g, x)?;
        g.add(x, y)
    }
}

pub fn offset_net_forward<T: Scalar>(q_map: &Tensor<T>, p: &DeformAttn<T>) -> Result<Tensor<T>> {
    run_inference(q_map, |g, x| p.offsets(g, x))
}

pub fn deformable_attention_forward<T: Scalar>(x: &Tensor<T>, p: &DeformAttn<T>) -> Result<Tensor<T>> {
    run_inference(x, |g, x| p.forward(g, x))
}

pub fn mhsa_forward<T: Scalar>(tokens: &Tensor<T>, p: &DeformAttn<T>) -> Result<Tensor<T>> {
    run_inference(tokens, |g, x| p.mhsa(g, x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_examples() {
        assert_eq!(reference_grid::<f64>(1, 1).unwrap().data(), &[0.0, 0.0]);
        let g = reference_grid::<f64>(2, 2).unwrap();
        assert_eq!(g.data(), &[-0.5, -0.5, 0.5, -0.5, -0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn heads_must_divide_channels() {
        assert!(matches!(DeformAttn::<f32>::new(&mut Init::new(0), 6, 4), Err(crate::Error::Config(_))));
    }

    #[test]
    fn zero_offset_net_gives_zero_offsets() {
        let mut p = DeformAttn::<f64>::new(&mut Init::new(0), 4, 2).unwrap();
        p.offset_pw.weight = Tensor::zeros(p.offset_pw.weight.shape());
        let q = Tensor::from_fn(&[4, 3, 3], |i| i as f64);
        let off = offset_net_forward(&q, &p).unwrap();
        assert_eq!(off.shape(), &[2, 3, 3]);
        assert!(off.data().iter().all(|&v| v == 0.0));
    }
}
