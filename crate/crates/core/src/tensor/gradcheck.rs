//! Central-difference gradient oracle and comparison helpers.

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::Scalar;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every element `i` of `x`.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, h: T) -> Tensor<T> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (h + h);
    }
    grad
}

/// `max_i |a_i − n_i| / max(max_i |n_i|, max_i |a_i|)`: the largest deviation
/// relative to the gradient's own scale. Zero when both are identically zero.
pub fn relative_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    let scale = analytic.max_abs().max(numeric.max_abs()).as_f64();
    let diff = analytic.max_abs_diff(numeric).as_f64();
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Outcome of comparing tape gradients with central differences for one input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Tensor<f64>,
    pub numeric: Tensor<f64>,
    pub rel_error: f64,
}

/// Checks `d/dx Σ r ⊙ block(x)` where `r` is a fixed projection, so every
/// output element contributes with a distinct weight.
///
/// `block` builds the forward on the supplied graph; it runs once on a
/// recording graph for the analytic gradient and `2·len(x)` times on inference
/// graphs for the numeric one.
pub fn check_block(
    x: &Tensor<f64>,
    projection: &Tensor<f64>,
    h: f64,
    make_graph: impl Fn() -> Graph<f64>,
    block: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<GradCheck> {
    let mut g = make_graph();
    let xv = g.variable(x.clone());
    let y = block(&mut g, xv)?;
    let r = g.constant(projection.clone());
    let weighted = g.mul(y, r)?;
    let loss = g.sum(weighted);
    g.backward(loss)?;
    let analytic = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut failure = None;
    let numeric = finite_diff_grad(
        |probe| {
            let mut g = Graph::inference();
            let xv = g.constant(probe.clone());
            match block(&mut g, xv) {
                Ok(y) => g.value(y).data().iter().zip(projection.data()).map(|(a, b)| a * b).sum(),
                Err(e) => {
                    failure.get_or_insert(e);
                    0.0
                }
            }
        },
        x,
        h,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let rel_error = relative_error(&analytic, &numeric);
    Ok(GradCheck { analytic, numeric, rel_error })
}
