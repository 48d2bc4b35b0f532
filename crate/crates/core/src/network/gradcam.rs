//! Grad-CAM over any named stage of the detector.

use super::model::Model;
use crate::error::{config_err, dim_err};
use crate::{Graph, Result, Scalar, Tensor, Var};

/// `ReLU(Σ_c α_c·A_c)` with `α_c` the spatial mean of `∂y/∂A_c`, min-max
/// normalized to `[0,1]`. A map with no positive response is all zeros.
pub fn cam_from<T: Scalar>(activations: &Tensor<T>, grads: &Tensor<T>) -> Result<Tensor<T>> {
    let s = activations.shape();
    if s.len() != 3 || grads.shape() != s {
        return Err(dim_err!("grad-cam needs matching [C,H,W] maps, got {s:?} and {:?}", grads.shape()));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let (a, d) = (activations.data(), grads.data());
    let mut cam = vec![T::zero(); hw];
    for ch in 0..c {
        let alpha = d[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>() / T::lit(hw as f64);
        for (o, &v) in cam.iter_mut().zip(&a[ch * hw..(ch + 1) * hw]) {
            *o += alpha * v;
        }
    }
    let cam: Vec<T> = cam.into_iter().map(|v| v.max(T::zero())).collect();
    let hi = cam.iter().copied().fold(T::zero(), T::max);
    let lo = cam.iter().copied().fold(hi, T::min);
    let out = if hi <= T::zero() {
        vec![T::zero(); hw]
    } else if hi == lo {
        vec![T::one(); hw]
    } else {
        cam.into_iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    Tensor::new(&[s[1], s[2]], out)
}

/// Heatmap `[H_l, W_l]` of `layer` for the highest-scoring class logit in the
/// image, explaining `sigmoid(max logit)`.
pub fn gradcam<T: Scalar>(model: &Model<T>, image: &Tensor<T>, layer: &str) -> Result<Tensor<T>> {
    let names = model.layer_names();
    if !names.iter().any(|n| n == layer) {
        return Err(config_err!("unknown layer '{layer}'; valid layers: {}", names.join(", ")));
    }
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let mut tapped: Option<Var> = None;
    let levels = model.forward_hooked(&mut g, x, &mut |name, g, v| {
        if name != layer {
            return Ok(v);
        }
        if g.shape(v).len() != 3 {
            return Err(dim_err!("layer '{name}' is not spatial: {:?}", g.shape(v)));
        }
        let leaf = g.variable(g.value(v).clone());
        tapped = Some(leaf);
        Ok(leaf)
    })?;
    let leaf = tapped.ok_or_else(|| config_err!("layer '{layer}' was not reached"))?;

    let mut best: Option<(Var, usize, T)> = None;
    for lv in &levels {
        for (i, &v) in g.value(lv.cls).data().iter().enumerate() {
            if best.is_none_or(|(_, _, b)| v > b) {
                best = Some((lv.cls, i, v));
            }
        }
    }
    let (var, idx, _) = best.ok_or_else(|| config_err!("head produced no class logits"))?;
    let logit = g.select(var, idx)?;
    let score = g.sigmoid(logit);
    g.backward(score)?;
    let acts = g.value(leaf).clone();
    let grads = g.grad(leaf).cloned().unwrap_or_else(|| Tensor::zeros(acts.shape()));
    cam_from(&acts, &grads)
}
