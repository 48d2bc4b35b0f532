//! Parameterized blocks built on the tensor graph.
//!
//! Every block exposes `forward(&self, &mut Graph<T>, Var) -> Result<Var>` so it
//! composes on a recording tape, plus a free `*_forward` function that runs the
//! block on a fresh inference graph for callers holding plain tensors.

mod ema;
mod deform;
mod init;
mod layers;
mod params;
pub mod selfcheck;
mod star;

pub use deform::{deformable_attention_forward, mhsa_forward, offset_net_forward, reference_grid, DeformAttn};
pub use ema::{ema_forward, Ema};
pub use init::Init;
pub use layers::{
    c2f_forward, conv_module_forward, sppf_forward, BatchNorm, Bottleneck, C2f, Conv2d, ConvModule, DwConv, Sppf,
};
pub use params::{join, Params};
pub(crate) use params::impl_params;
pub use star::{star_block_forward, star_op, star_op_pairwise, StarBlock};

use crate::{Graph, Result, Scalar, Tensor, Var};

/// Evaluates `f` on an inference graph seeded with `x` and returns its output.
pub(crate) fn run_inference<T: Scalar>(
    x: &Tensor<T>,
    f: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = f(&mut g, xv)?;
    Ok(g.value(y).clone())
}
