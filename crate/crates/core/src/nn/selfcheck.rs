//! Finite-difference checks of the block backward passes on small inputs.

use super::{BatchNorm, ConvModule, DeformAttn, Ema, Init, StarBlock};
use crate::rng::SplitMix64;
use crate::tensor::gradcheck::check_block;
use crate::{Graph, Result, Tensor};

/// Relative gradient error one block achieved.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    pub block: &'static str,
    pub rel_error: f64,
    /// Largest analytic gradient magnitude; zero would make the check vacuous.
    pub grad_scale: f64,
}

/// Input extents of [`block_gradchecks`]: `[C,H,W]`.
pub const CHECK_SHAPE: [usize; 3] = [4, 6, 6];
pub const CHECK_STEP: f64 = 1e-4;
pub const CHECK_TOLERANCE: f64 = 1e-3;

fn random_bn(bn: &mut BatchNorm<f64>, rng: &mut SplitMix64) {
    let c = bn.channels();
    bn.weight = Tensor::from_fn(&[c], |_| rng.uniform(0.5, 1.5));
    bn.bias = Tensor::from_fn(&[c], |_| rng.uniform(-0.5, 0.5));
    bn.running_mean = Tensor::from_fn(&[c], |_| rng.uniform(-0.5, 0.5));
    bn.running_var = Tensor::from_fn(&[c], |_| rng.uniform(0.5, 2.0));
}

/// Star block, deformable attention (2 heads), EMA with `groups` groups and a
/// 3×3 ConvModule, each on a seeded `4×6×6` input with non-trivial
/// normalization statistics. `faulty` swaps in a wrong sigmoid backward rule.
pub fn block_gradchecks(seed: u64, groups: usize, faulty: bool) -> Result<Vec<BlockCheck>> {
    let mut rng = SplitMix64::new(seed);
    let c = CHECK_SHAPE[0];
    let x = Tensor::from_fn(&CHECK_SHAPE, |_| rng.normal());
    let r = Tensor::from_fn(&CHECK_SHAPE, |_| rng.uniform(-1.0, 1.0));
    let mut init = Init::new(rng.next_u64());

    let mut star = StarBlock::<f64>::new(&mut init, c);
    random_bn(&mut star.dw_bn, &mut rng);
    random_bn(&mut star.g_bn, &mut rng);
    let deform = DeformAttn::<f64>::new(&mut init, c, 2)?;
    let mut ema = Ema::<f64>::new(&mut init, c, groups)?;
    ema.gn_bias = Tensor::from_fn(ema.gn_bias.shape(), |_| rng.uniform(-0.5, 0.5));
    let mut conv = ConvModule::<f64>::new(&mut init, c, c, 3, 1);
    random_bn(&mut conv.bn, &mut rng);

    let graph = || if faulty { Graph::new().with_faulty_sigmoid() } else { Graph::new() };
    let run = |block: &'static str, f: &dyn Fn(&mut Graph<f64>, crate::Var) -> Result<crate::Var>| {
        let c = check_block(&x, &r, CHECK_STEP, graph, f)?;
        Ok(BlockCheck { block, rel_error: c.rel_error, grad_scale: c.analytic.max_abs() })
    };
    Ok(vec![
        run("star", &|g, x| star.forward(g, x))?,
        run("deform-attn", &|g, x| deform.forward(g, x))?,
        run("ema", &|g, x| ema.forward(g, x))?,
        run("conv", &|g, x| conv.forward(g, x))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_blocks_pass_and_fault_is_caught() {
        let ok = block_gradchecks(5, 2, false).unwrap();
        assert_eq!(ok.len(), 4);
        for c in &ok {
            assert!(c.rel_error < CHECK_TOLERANCE && c.grad_scale > 0.0, "{c:?}");
        }
        let bad = block_gradchecks(5, 2, true).unwrap();
        assert!(bad.iter().any(|c| c.rel_error >= CHECK_TOLERANCE));
    }

    #[test]
    fn groups_must_divide_channels() {
        assert!(block_gradchecks(0, 3, false).is_err());
    }
}
