//! Pure forward kernels and the gradient kernels the tape replays.
//!
//! Feature maps are `[C, H, W]`; convolution weights are `[C_out, C_in, kh, kw]`
//! and depthwise weights `[C, kh, kw]`.

use super::{gemm, Tensor};
use crate::error::{dim_err, Result};
use crate::Scalar;

// ---------------------------------------------------------------------------
// scalar activations

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

#[inline]
pub fn relu6<T: Scalar>(x: T) -> T {
    x.max(T::zero()).min(T::lit(6.0))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

// ---------------------------------------------------------------------------
// shape helpers

fn expect_rank<T: Scalar>(t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(dim_err!("{what}: expected rank {rank}, got shape {:?}", t.shape()));
    }
    Ok(())
}

fn dims3<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    expect_rank(t, 3, what)?;
    let s = t.shape();
    Ok((s[0], s[1], s[2]))
}

/// `floor((n + 2·pad − k) / stride) + 1`, or an error when the kernel does not fit.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(dim_err!("stride must be positive"));
    }
    if k == 0 || k > n + 2 * pad {
        return Err(dim_err!("kernel {k} larger than padded extent {}", n + 2 * pad));
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

/// Splits `shape` around `axis` into (outer, axis extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Range of output positions `o` for which `o·stride + off − pad` lands inside `0..n_in`.
#[inline]
fn valid_out_range(n_out: usize, n_in: usize, off: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o·s + off ≥ pad  and  o·s + off − pad ≤ n_in − 1
    let lo = if off >= pad { 0 } else { (pad - off).div_ceil(stride).min(n_out) };
    let top = n_in + pad - 1;
    let hi = if off > top { 0 } else { ((top - off) / stride + 1).min(n_out) };
    (lo, hi.max(lo))
}

// ---------------------------------------------------------------------------
// matmul

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(dim_err!("matmul of {:?} and {:?}", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![T::zero(); m * n];
    gemm(m, n, k, a.data(), b.data(), &mut c, false);
    Ok(Tensor::from_parts(vec![m, n], c))
}

pub fn transpose2d<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(a, 2, "transpose")?;
    let (r, c) = (a.shape()[0], a.shape()[1]);
    Ok(Tensor::from_parts(vec![c, r], transpose_raw(a.data(), r, c)))
}

fn transpose_raw<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    const B: usize = 32;
    let mut out = vec![T::zero(); rows * cols];
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                for j in j0..(j0 + B).min(cols) {
                    out[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// dense convolution (im2col + gemm)

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        let oh = conv_out_extent(h, kh, stride, pad)?;
        let ow = conv_out_extent(w, kw, stride, pad)?;
        Ok(Self { c, h, w, kh, kw, stride, pad, oh, ow })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `[C·kh·kw, oh·ow]` patch matrix, zero outside the input.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.oh * g.ow;
    let mut cols = vec![T::zero(); g.c * g.kh * g.kw * p];
    for ch in 0..g.c {
        let plane = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_out_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_out_range(g.ow, g.w, kx, g.stride, g.pad);
                if ox0 >= ox1 {
                    continue;
                }
                let row = ((ch * g.kh + ky) * g.kw + kx) * p;
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        dst[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.oh * g.ow;
    let mut x = vec![T::zero(); g.c * g.h * g.w];
    for ch in 0..g.c {
        let plane = &mut x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_out_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_out_range(g.ow, g.w, kx, g.stride, g.pad);
                if ox0 >= ox1 {
                    continue;
                }
                let row = ((ch * g.kh + ky) * g.kw + kx) * p;
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    for ox in ox0..ox1 {
                        plane[iy * g.w + ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
    x
}

fn conv_geom<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<(ConvGeom, usize)> {
    let (c, h, w) = dims3(input, "conv2d input")?;
    expect_rank(weight, 4, "conv2d weight")?;
    let ws = weight.shape();
    if ws[1] != c {
        return Err(dim_err!("conv2d: input {:?} vs weight {:?}", input.shape(), ws));
    }
    let g = ConvGeom::new(c, h, w, ws[2], ws[3], stride, pad)
        .map_err(|e| dim_err!("conv2d: input {:?}, weight {:?}: {e}", input.shape(), ws))?;
    Ok((g, ws[0]))
}

/// Cross-correlation of `[C_in,H,W]` with `[C_out,C_in,kh,kw]`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (g, co) = conv_geom(input, weight, stride, pad)?;
    let p = g.oh * g.ow;
    let k = g.c * g.kh * g.kw;
    let mut out = vec![T::zero(); co * p];
    if g.is_pointwise() {
        gemm(co, p, k, weight.data(), input.data(), &mut out, false);
    } else {
        let cols = im2col(input.data(), &g);
        gemm(co, p, k, weight.data(), &cols, &mut out, false);
    }
    Ok(Tensor::from_parts(vec![co, g.oh, g.ow], out))
}

pub fn conv2d_grad_input<T: Scalar>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    input_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let ws = weight.shape();
    let g = ConvGeom::new(input_shape[0], input_shape[1], input_shape[2], ws[2], ws[3], stride, pad)?;
    let co = ws[0];
    let p = g.oh * g.ow;
    let k = g.c * g.kh * g.kw;
    let wt = transpose_raw(weight.data(), co, k);
    let mut dcols = vec![T::zero(); k * p];
    gemm(k, p, co, &wt, grad_out.data(), &mut dcols, false);
    let dx = if g.is_pointwise() { dcols } else { col2im(&dcols, &g) };
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

pub fn conv2d_grad_weight<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(input, "conv2d input")?;
    let g = ConvGeom::new(c, h, w, weight_shape[2], weight_shape[3], stride, pad)?;
    let co = weight_shape[0];
    let p = g.oh * g.ow;
    let k = g.c * g.kh * g.kw;
    let cols_t = if g.is_pointwise() {
        transpose_raw(input.data(), k, p)
    } else {
        transpose_raw(&im2col(input.data(), &g), k, p)
    };
    let mut dw = vec![T::zero(); co * k];
    gemm(co, k, p, grad_out.data(), &cols_t, &mut dw, false);
    Ok(Tensor::from_parts(weight_shape.to_vec(), dw))
}

// ---------------------------------------------------------------------------
// depthwise convolution

fn dw_geom<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (c, h, w) = dims3(input, "depthwise input")?;
    expect_rank(weight, 3, "depthwise weight")?;
    let ws = weight.shape();
    if ws[0] != c {
        return Err(dim_err!("depthwise: input {:?} vs weight {:?}", input.shape(), ws));
    }
    ConvGeom::new(c, h, w, ws[1], ws[2], stride, pad)
        .map_err(|e| dim_err!("depthwise: input {:?}, weight {:?}: {e}", input.shape(), ws))
}

/// Per-channel cross-correlation of `[C,H,W]` with `[C,kh,kw]`.
pub fn depthwise_conv2d<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = dw_geom(input, weight, stride, pad)?;
    let mut out = vec![T::zero(); g.c * g.oh * g.ow];
    let x = input.data();
    for ch in 0..g.c {
        let plane = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        let kern = &weight.data()[ch * g.kh * g.kw..(ch + 1) * g.kh * g.kw];
        let dst = &mut out[ch * g.oh * g.ow..(ch + 1) * g.oh * g.ow];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_out_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let wv = kern[ky * g.kw + kx];
                let (ox0, ox1) = valid_out_range(g.ow, g.w, kx, g.stride, g.pad);
                if ox0 >= ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        for (o, &v) in row[ox0..ox1].iter_mut().zip(&src[ix0..]) {
                            *o += wv * v;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            row[ox] += wv * src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.c, g.oh, g.ow], out))
}

pub fn depthwise_grad_input<T: Scalar>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    input_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let ws = weight.shape();
    let g = ConvGeom::new(input_shape[0], input_shape[1], input_shape[2], ws[1], ws[2], stride, pad)?;
    let mut dx = vec![T::zero(); g.c * g.h * g.w];
    let go = grad_out.data();
    for ch in 0..g.c {
        let plane = &mut dx[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        let kern = &weight.data()[ch * g.kh * g.kw..(ch + 1) * g.kh * g.kw];
        let src = &go[ch * g.oh * g.ow..(ch + 1) * g.oh * g.ow];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_out_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let wv = kern[ky * g.kw + kx];
                let (ox0, ox1) = valid_out_range(g.ow, g.w, kx, g.stride, g.pad);
                if ox0 >= ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    for ox in ox0..ox1 {
                        plane[iy * g.w + ox * g.stride + kx - g.pad] += wv * src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

pub fn depthwise_grad_weight<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(input, "depthwise input")?;
    let g = ConvGeom::new(c, h, w, weight_shape[1], weight_shape[2], stride, pad)?;
    let mut dw = vec![T::zero(); c * g.kh * g.kw];
    let (x, go) = (input.data(), grad_out.data());
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let src = &go[ch * g.oh * g.ow..(ch + 1) * g.oh * g.ow];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_out_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_out_range(g.ow, g.w, kx, g.stride, g.pad);
                if ox0 >= ox1 {
                    continue;
                }
                let mut acc = T::zero();
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    for ox in ox0..ox1 {
                        acc += src[oy * g.ow + ox] * plane[iy * w + ox * g.stride + kx - g.pad];
                    }
                }
                dw[(ch * g.kh + ky) * g.kw + kx] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(weight_shape.to_vec(), dw))
}

// ---------------------------------------------------------------------------
// softmax

/// Softmax along `axis`, computed after subtracting the slice maximum.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| (o * n + t) * inner + i;
            let mut max = T::neg_infinity();
            for t in 0..n {
                max = max.max(src[at(t)]);
            }
            let mut sum = T::zero();
            for t in 0..n {
                let e = (src[at(t)] - max).exp();
                out[at(t)] = e;
                sum += e;
            }
            for t in 0..n {
                out[at(t)] /= sum;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `dx = y ⊙ (dy − Σ_axis dy ⊙ y)` given the softmax output `y`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split_axis(y.shape(), axis)?;
    let (ys, ds) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); ys.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| (o * n + t) * inner + i;
            let dot: T = (0..n).map(|t| ys[at(t)] * ds[at(t)]).sum();
            for t in 0..n {
                dx[at(t)] = ys[at(t)] * (ds[at(t)] - dot);
            }
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), dx))
}

// ---------------------------------------------------------------------------
// bilinear sampling

/// One bilinear neighbour: flat spatial index (None when outside the map),
/// its weight, and the weight's derivative w.r.t. the normalized (u, v).
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    index: Option<usize>,
    weight: T,
    d_u: T,
    d_v: T,
}

/// Normalized `(u, v) ∈ [−1,1]²` maps to pixel `x = ((u+1)·W − 1)/2`, so
/// `u = (2j+1)/W − 1` lands on the centre of column `j`. Neighbours outside the
/// map contribute zero.
fn bilinear_taps<T: Scalar>(u: T, v: T, h: usize, w: usize) -> [Tap<T>; 4] {
    let half = T::lit(0.5);
    let x = ((u + T::one()) * T::lit(w as f64) - T::one()) * half;
    let y = ((v + T::one()) * T::lit(h as f64) - T::one()) * half;
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (dxdu, dydv) = (T::lit(w as f64) * half, T::lit(h as f64) * half);
    let one = T::one();
    let locate = |xi: T, yi: T| -> Option<usize> {
        let (xi, yi) = (xi.to_i64()?, yi.to_i64()?);
        (xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h).then(|| yi as usize * w + xi as usize)
    };
    [
        Tap { index: locate(x0, y0), weight: (one - fx) * (one - fy), d_u: -(one - fy) * dxdu, d_v: -(one - fx) * dydv },
        Tap { index: locate(x0 + one, y0), weight: fx * (one - fy), d_u: (one - fy) * dxdu, d_v: -fx * dydv },
        Tap { index: locate(x0, y0 + one), weight: (one - fx) * fy, d_u: -fy * dxdu, d_v: (one - fx) * dydv },
        Tap { index: locate(x0 + one, y0 + one), weight: fx * fy, d_u: fy * dxdu, d_v: fx * dydv },
    ]
}

/// Samples every channel of `map` at one normalized point.
pub fn bilinear_sample<T: Scalar>(map: &Tensor<T>, point: (T, T)) -> Result<Tensor<T>> {
    let (c, _, _) = dims3(map, "bilinear map")?;
    let pts = Tensor::from_parts(vec![1, 2], vec![point.0, point.1]);
    bilinear_sample_points(map, &pts)?.reshape(&[c])
}

/// Samples `map` at each row `(u, v)` of `points [N, 2]`, giving `[N, C]`.
pub fn bilinear_sample_points<T: Scalar>(map: &Tensor<T>, points: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(map, "bilinear map")?;
    if points.rank() != 2 || points.shape()[1] != 2 {
        return Err(dim_err!("bilinear points must be [N, 2], got {:?}", points.shape()));
    }
    let n = points.shape()[0];
    let hw = h * w;
    let m = map.data();
    let mut out = vec![T::zero(); n * c];
    for (i, p) in points.data().chunks_exact(2).enumerate() {
        let row = &mut out[i * c..(i + 1) * c];
        for tap in bilinear_taps(p[0], p[1], h, w) {
            if let (Some(idx), true) = (tap.index, tap.weight != T::zero()) {
                for (ch, o) in row.iter_mut().enumerate() {
                    *o += tap.weight * m[ch * hw + idx];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c], out))
}

/// Gradients of `bilinear_sample_points` w.r.t. the map and the points.
pub fn bilinear_sample_backward<T: Scalar>(
    map: &Tensor<T>,
    points: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = dims3(map, "bilinear map")?;
    let hw = h * w;
    let m = map.data();
    let go = grad_out.data();
    let mut dmap = vec![T::zero(); m.len()];
    let mut dpts = vec![T::zero(); points.len()];
    for (i, p) in points.data().chunks_exact(2).enumerate() {
        let g = &go[i * c..(i + 1) * c];
        for tap in bilinear_taps(p[0], p[1], h, w) {
            let Some(idx) = tap.index else { continue };
            let mut dot = T::zero();
            for ch in 0..c {
                dmap[ch * hw + idx] += tap.weight * g[ch];
                dot += g[ch] * m[ch * hw + idx];
            }
            dpts[2 * i] += tap.d_u * dot;
            dpts[2 * i + 1] += tap.d_v * dot;
        }
    }
    Ok((
        Tensor::from_parts(map.shape().to_vec(), dmap),
        Tensor::from_parts(points.shape().to_vec(), dpts),
    ))
}

// ---------------------------------------------------------------------------
// pooling and reductions

/// Spatial axis of a `[C, H, W]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    H,
    W,
}

/// Mean over `axis`, keeping it with extent 1.
pub fn mean_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    let src = x.data();
    let scale = T::one() / T::lit(n as f64);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for t in 0..n {
            let s = &src[(o * n + t) * inner..(o * n + t + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(s) {
                *d += v;
            }
        }
        for d in dst.iter_mut() {
            *d *= scale;
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Ok(Tensor::from_parts(shape, out))
}

/// Per-channel mean of a `[C, H, W]` map.
pub fn global_avg_pool<T: Scalar>(map: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(map, "global_avg_pool")?;
    let pooled = mean_axis(&map.reshape(&[c, h * w])?, 1)?;
    pooled.reshape(&[c])
}

/// Mean along one spatial axis: `Axis::H` gives `[C,1,W]`, `Axis::W` gives `[C,H,1]`.
pub fn avg_pool_axis<T: Scalar>(map: &Tensor<T>, axis: Axis) -> Result<Tensor<T>> {
    dims3(map, "avg_pool_axis")?;
    mean_axis(map, if axis == Axis::H { 1 } else { 2 })
}

fn pool_geom<T: Scalar>(map: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (c, h, w) = dims3(map, "max_pool2d")?;
    if pad >= k {
        return Err(dim_err!("max_pool2d: pad {pad} must be smaller than kernel {k}"));
    }
    ConvGeom::new(c, h, w, k, k, stride, pad)
}

/// Windowed maximum; padded cells never win.
pub fn max_pool2d<T: Scalar>(map: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = pool_geom(map, k, stride, pad)?;
    let (vals, _) = max_pool_impl(map.data(), &g);
    Ok(Tensor::from_parts(vec![g.c, g.oh, g.ow], vals))
}

/// Routes each output gradient to the first maximal input cell of its window.
pub fn max_pool2d_backward<T: Scalar>(
    map: &Tensor<T>,
    grad_out: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = pool_geom(map, k, stride, pad)?;
    let (_, arg) = max_pool_impl(map.data(), &g);
    let mut dx = vec![T::zero(); map.len()];
    for (o, &src) in arg.iter().enumerate() {
        dx[src] += grad_out.data()[o];
    }
    Ok(Tensor::from_parts(map.shape().to_vec(), dx))
}

fn max_pool_impl<T: Scalar>(x: &[T], g: &ConvGeom) -> (Vec<T>, Vec<usize>) {
    let n = g.c * g.oh * g.ow;
    let mut vals = vec![T::neg_infinity(); n];
    let mut arg = vec![0usize; n];
    for ch in 0..g.c {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o = (ch * g.oh + oy) * g.ow + ox;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        let idx = (ch * g.h + iy as usize) * g.w + ix as usize;
                        if x[idx] > vals[o] {
                            vals[o] = x[idx];
                            arg[o] = idx;
                        }
                    }
                }
            }
        }
    }
    (vals, arg)
}

// ---------------------------------------------------------------------------
// layout

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| dim_err!("concat of nothing"))?;
    let (outer, _, inner) = split_axis(first.shape(), axis)?;
    let mut total = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(dim_err!("concat along {axis}: {:?} vs {:?}", first.shape(), p.shape()));
        }
        total += p.shape()[axis];
    }
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    if len == 0 || start + len > n {
        return Err(dim_err!("narrow {start}..{} of axis {axis} in {:?}", start + len, x.shape()));
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Scatters `grad` back into a zero tensor of `full_shape` at `start` along `axis`.
pub(crate) fn narrow_backward<T: Scalar>(grad: &Tensor<T>, full_shape: &[usize], axis: usize, start: usize) -> Tensor<T> {
    let (outer, n, inner) = split_axis(full_shape, axis).expect("validated in forward");
    let len = grad.shape()[axis];
    let mut out = vec![T::zero(); full_shape.iter().product()];
    for o in 0..outer {
        let dst = (o * n + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&grad.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(full_shape.to_vec(), out)
}

/// Nearest-neighbour upsampling of a `[C,H,W]` map by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(x, "upsample")?;
    if factor == 0 {
        return Err(dim_err!("upsample factor must be positive"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let src = x.data();
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let srow = &src[(ch * h + oy / factor) * w..(ch * h + oy / factor + 1) * w];
            let drow = &mut out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
            for (ox, d) in drow.iter_mut().enumerate() {
                *d = srow[ox / factor];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

pub(crate) fn upsample_nearest_backward<T: Scalar>(grad: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = grad.shape();
    let (c, oh, ow) = (s[0], s[1], s[2]);
    let (h, w) = (oh / factor, ow / factor);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[(ch * h + oy / factor) * w + ox / factor] += grad.data()[(ch * oh + oy) * ow + ox];
            }
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}

// ---------------------------------------------------------------------------
// broadcasting (right operand onto the left operand's shape)

fn broadcast_strides(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != x && y != 1) {
        return Err(dim_err!("cannot broadcast {b:?} onto {a:?}"));
    }
    let mut strides = vec![0; b.len()];
    let mut acc = 1;
    for d in (0..b.len()).rev() {
        strides[d] = if b[d] == 1 { 0 } else { acc };
        acc *= b[d];
    }
    Ok(strides)
}

/// Calls `f(i, j)` for each flat index `i` of `shape` and the matching broadcast offset `j`.
fn for_each_broadcast(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let last = rank - 1;
    let (inner, inner_stride) = (shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let mut i = 0;
    while i < n {
        for t in 0..inner {
            f(i + t, base + t * inner_stride);
        }
        i += inner;
        // advance the outer odometer
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            base += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let strides = broadcast_strides(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); ad.len()];
    for_each_broadcast(a.shape(), &strides, |i, j| out[i] = f(ad[i], bd[j]));
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

/// Sums `grad` (shaped like the left operand) down to the broadcast operand's `shape`.
pub(crate) fn reduce_to<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let strides = broadcast_strides(grad.shape(), shape).expect("validated in forward");
    let mut out = vec![T::zero(); shape.iter().product()];
    let g = grad.data();
    for_each_broadcast(grad.shape(), &strides, |i, j| out[j] += g[i]);
    Tensor::from_parts(shape.to_vec(), out)
}

/// `Σ_i a_i · b_i` over the broadcast, reduced to `b`'s shape (the gradient of `a ⊙ b` w.r.t. `b`).
pub(crate) fn broadcast_product_reduce<T: Scalar>(grad: &Tensor<T>, a: &Tensor<T>, b_shape: &[usize]) -> Tensor<T> {
    let strides = broadcast_strides(grad.shape(), b_shape).expect("validated in forward");
    let mut out = vec![T::zero(); b_shape.iter().product()];
    let (g, ad) = (grad.data(), a.data());
    for_each_broadcast(grad.shape(), &strides, |i, j| out[j] += g[i] * ad[i]);
    Tensor::from_parts(b_shape.to_vec(), out)
}

/// `grad_i · b_j` over the broadcast (the gradient of `a ⊙ b` w.r.t. `a`).
pub(crate) fn broadcast_scale<T: Scalar>(grad: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    broadcast_binary(grad, b, |g, v| g * v).expect("validated in forward")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn valid_range_matches_bruteforce() {
        for n_in in 1..7 {
            for k in 1..6 {
                for stride in 1..4 {
                    for pad in 0..k {
                        let Ok(n_out) = conv_out_extent(n_in, k, stride, pad) else { continue };
                        for off in 0..k {
                            let (lo, hi) = valid_out_range(n_out, n_in, off, stride, pad);
                            let expect: Vec<usize> = (0..n_out)
                                .filter(|&o| {
                                    let i = (o * stride + off) as isize - pad as isize;
                                    i >= 0 && (i as usize) < n_in
                                })
                                .collect();
                            assert_eq!((lo..hi).collect::<Vec<_>>(), expect);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f32>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn conv_kernel_larger_than_input() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &w, 1, 0).is_err());
        assert!(conv2d(&x, &w, 1, 1).is_ok());
    }

    #[test]
    fn max_pool_ignores_padding() {
        let x = t(&[1, 2, 2], &[-4.0, -3.0, -2.0, -1.0]);
        let y = max_pool2d(&x, 3, 1, 1).unwrap();
        assert_eq!(y.data(), &[-1.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn broadcast_channel_bias() {
        let x = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1, 1], &[10.0, 20.0]);
        let y = broadcast_binary(&x, &b, |a, b| a + b).unwrap();
        assert_eq!(y.data(), &[11.0, 12.0, 23.0, 24.0]);
        let r = reduce_to(&y, &[2, 1, 1]);
        assert_eq!(r.data(), &[23.0, 47.0]);
        assert!(broadcast_binary(&x, &t(&[3, 1, 1], &[0.0; 3]), |a, _| a).is_err());
    }

    #[test]
    fn broadcast_middle_axis() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 2], |i| i as f64);
        let b = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = broadcast_binary(&x, &b, |a, b| a * b).unwrap();
        for c in 0..2 {
            for h in 0..3 {
                for w in 0..2 {
                    assert_eq!(y.get(&[c, h, w]), x.get(&[c, h, w]) * b.get(&[c, 0, w]));
                }
            }
        }
    }

    #[test]
    fn concat_and_narrow_invert() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 1, 2], |i| 100.0 + i as f64);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2]);
        assert_eq!(narrow(&c, 1, 0, 3).unwrap(), a);
        assert_eq!(narrow(&c, 1, 3, 1).unwrap(), b);
        assert!(narrow(&c, 1, 3, 2).is_err());
    }

    #[test]
    fn upsample_round_trip_sum() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 2], |i| i as f64);
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(y.get(&[0, 3, 3]), 3.0);
        assert_eq!(y.get(&[0, 1, 2]), 1.0);
        let back = upsample_nearest_backward(&Tensor::<f64>::ones(&[1, 4, 4]), 2);
        assert_eq!(back.data(), &[4.0; 4]);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
    }
}
