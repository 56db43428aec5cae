//! Forward and backward kernels for the differentiable op set.
//!
//! Spatial tensors are `[C, H, W]`. Every forward function is pure; the
//! backward functions take the upstream gradient plus whatever the forward
//! pass saved and return input gradients.

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;

fn expect_chw<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(shape_err(op, format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Unfolds a `[c, h, w]` input into `[c * 9, h * w]` patch rows for a
/// 3x3 kernel with zero padding 1. Written in one pass, no pre-zeroing.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = Vec::with_capacity(c * 9 * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        cols.resize(cols.len() + w, T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    match kx {
                        0 => {
                            cols.push(T::zero());
                            cols.extend_from_slice(&src[..w - 1]);
                        }
                        1 => cols.extend_from_slice(src),
                        _ => {
                            cols.extend_from_slice(&src[1..]);
                            cols.push(T::zero());
                        }
                    }
                }
            }
        }
    }
    cols
}

fn check_conv<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (c, h, w) = expect_chw("conv2d", input)?;
    let o = match weight.shape() {
        [o, wc, 3, 3] if *wc == c => *o,
        s => {
            return Err(shape_err(
                "conv2d",
                format!("weight {s:?} incompatible with input {:?}", input.shape()),
            ))
        }
    };
    if bias.shape() != [o] {
        return Err(shape_err(
            "conv2d",
            format!("bias {:?} for {o} output channels", bias.shape()),
        ));
    }
    Ok((c, h, w, o))
}

/// 3x3 convolution, stride 1, zero padding 1.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    conv2d_with_cols(input, weight, bias).map(|(y, _)| y)
}

/// [`conv2d`] that also returns the unfolded input, which
/// [`conv2d_backward_cols`] can reuse.
pub fn conv2d_with_cols<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (c, h, w, o) = check_conv(input, weight, bias)?;
    let hw = h * w;
    let cols = im2col(input.data(), c, h, w);
    let mut out = vec![T::zero(); o * hw];
    for (oc, &b) in bias.data().iter().enumerate() {
        out[oc * hw..(oc + 1) * hw].fill(b);
    }
    T::gemm(o, c * 9, hw, weight.data(), false, &cols, false, T::one(), &mut out);
    Ok((Tensor::new(vec![o, h, w], out)?, cols))
}

/// Gradients of [`conv2d`]: `(d_input, d_weight, d_bias)`. The input
/// gradient is skipped when `need_input` is false.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (c, h, w) = input.chw();
    conv2d_backward_cols(&im2col(input.data(), c, h, w), (c, h, w), weight, grad_out, need_input)
}

/// [`conv2d_backward`] from the unfolded input of a `(c, h, w)` tensor.
pub fn conv2d_backward_cols<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let o = weight.shape()[0];
    let hw = h * w;
    let dy = grad_out.data();

    let mut dw = vec![T::zero(); o * c * 9];
    T::gemm(o, hw, c * 9, dy, false, cols, true, T::zero(), &mut dw);
    let db: Vec<T> = (0..o)
        .map(|oc| dy[oc * hw..(oc + 1) * hw].iter().fold(T::zero(), |a, &b| a + b))
        .collect();

    // the input gradient is a 3x3 correlation of dy with the kernels
    // flipped in space and transposed in channels
    let dx = need_input.then(|| {
        let wd = weight.data();
        let mut flipped = Vec::with_capacity(c * o * 9);
        for ci in 0..c {
            for oc in 0..o {
                for k in (0..9).rev() {
                    flipped.push(wd[(oc * c + ci) * 9 + k]);
                }
            }
        }
        let dy_cols = im2col(dy, o, h, w);
        let mut dx = vec![T::zero(); c * hw];
        T::gemm(c, o * 9, hw, &flipped, false, &dy_cols, false, T::zero(), &mut dx);
        Tensor::new(vec![c, h, w], dx).expect("conv input shape")
    });
    (
        dx,
        Tensor::new(weight.shape().to_vec(), dw).expect("conv weight shape"),
        Tensor::new(vec![o], db).expect("conv bias shape"),
    )
}

/// 2x2 max pooling with stride 2. Returns the output and, per output
/// element, the flat input index it came from (first maximum in row-major
/// window order on ties).
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = expect_chw("maxpool2", input)?;
    if h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2 {
        return Err(shape_err("maxpool2", format!("odd spatial size {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = ci * h * w + 2 * y * w + 2 * xx;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

pub fn maxpool2_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] = d[i] + g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = expect_chw("upsample2", input)?;
    let (oh, ow) = (2 * h, 2 * w);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            let row = &x[ci * h * w + (y / 2) * w..][..w];
            for xx in 0..ow {
                out.push(row[xx / 2]);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn upsample2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (c, oh, ow) = grad_out.chw();
    let (h, w) = (oh / 2, ow / 2);
    let g = grad_out.data();
    let mut dx = Tensor::zeros(&[c, h, w]);
    let d = dx.data_mut();
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let i = ci * h * w + (y / 2) * w + xx / 2;
                d[i] = d[i] + g[ci * oh * ow + y * ow + xx];
            }
        }
    }
    dx
}

/// Concatenates `[C_i, H, W]` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| shape_err("concat", "no inputs"))?;
    let (_, h, w) = expect_chw("concat", first)?;
    let mut channels = 0;
    let mut data = Vec::new();
    for t in inputs {
        let (c, th, tw) = expect_chw("concat", t)?;
        if (th, tw) != (h, w) {
            return Err(shape_err(
                "concat",
                format!("spatial sizes {:?} vs {:?}", first.shape(), t.shape()),
            ));
        }
        channels += c;
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![channels, h, w], data)
}

pub fn concat_backward<T: Scalar>(shapes: &[Vec<usize>], grad_out: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.clone(), grad_out.data()[offset..offset + n].to_vec()).expect("concat split");
            offset += n;
            t
        })
        .collect()
}

fn zip_with<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, slope: T, grad_out: &Tensor<T>) -> Tensor<T> {
    zip_with("leaky_relu", x, grad_out, |v, g| if v > T::zero() { g } else { g * slope })
        .expect("leaky_relu grad shape")
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    zip_with("sigmoid", y, grad_out, |s, g| g * s * (T::one() - s)).expect("sigmoid grad shape")
}

/// Statistics saved by [`channel_norm`] for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes every channel by its own spatial mean and (biased) variance,
/// then applies a learned per-channel scale and shift.
pub fn channel_norm<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (c, h, w) = expect_chw("channel_norm", x)?;
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(shape_err(
            "channel_norm",
            format!("scale {:?} / shift {:?} for {c} channels", scale.shape(), shift.shape()),
        ));
    }
    let m = h * w;
    let mf = T::of(m as f64);
    let eps = T::of(NORM_EPS);
    let mut y = Vec::with_capacity(c * m);
    let mut xhat = Vec::with_capacity(c * m);
    let mut inv_std = Vec::with_capacity(c);
    for ci in 0..c {
        let plane = &x.data()[ci * m..(ci + 1) * m];
        let mean = plane.iter().fold(T::zero(), |a, &b| a + b) / mf;
        let var = plane.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / mf;
        let is = T::one() / (var + eps).sqrt();
        let (g, b) = (scale.data()[ci], shift.data()[ci]);
        for &v in plane {
            let xh = (v - mean) * is;
            xhat.push(xh);
            y.push(g * xh + b);
        }
        inv_std.push(is);
    }
    Ok((
        Tensor::new(vec![c, h, w], y)?,
        NormCache {
            xhat: Tensor::new(vec![c, h, w], xhat)?,
            inv_std,
        },
    ))
}

/// Returns `(d_x, d_scale, d_shift)`.
pub fn channel_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c, h, w) = cache.xhat.chw();
    let m = h * w;
    let mf = T::of(m as f64);
    let mut dx = Vec::with_capacity(c * m);
    let mut dscale = Vec::with_capacity(c);
    let mut dshift = Vec::with_capacity(c);
    for ci in 0..c {
        let xh = &cache.xhat.data()[ci * m..(ci + 1) * m];
        let dy = &grad_out.data()[ci * m..(ci + 1) * m];
        let g = scale.data()[ci];
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for (&a, &b) in dy.iter().zip(xh) {
            sum_dy = sum_dy + a;
            sum_dy_xh = sum_dy_xh + a * b;
        }
        dscale.push(sum_dy_xh);
        dshift.push(sum_dy);
        let k = g * cache.inv_std[ci] / mf;
        for (&a, &b) in dy.iter().zip(xh) {
            dx.push(k * (mf * a - sum_dy - b * sum_dy_xh));
        }
    }
    (
        Tensor::new(vec![c, h, w], dx).expect("norm dx"),
        Tensor::new(vec![c], dscale).expect("norm dscale"),
        Tensor::new(vec![c], dshift).expect("norm dshift"),
    )
}

/// Kind of axis reduction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Result of [`reduce`]: output plus the per-input output index (and, for
/// `Max`, the winning flat input index per output element).
#[derive(Clone, Debug)]
pub struct ReduceCache {
    pub out_index: Vec<usize>,
    pub argmax: Vec<usize>,
    pub group_size: usize,
}

/// Reduces over `axes`. The output keeps the remaining axes in order; a
/// full reduction yields shape `[1]`. The max subgradient goes to the lowest
/// flat index among tied maxima.
pub fn reduce<T: Scalar>(x: &Tensor<T>, axes: &[usize], kind: Reduce) -> Result<(Tensor<T>, ReduceCache)> {
    let shape = x.shape();
    if axes.iter().any(|&a| a >= shape.len()) || axes.is_empty() {
        return Err(shape_err("reduce", format!("axes {axes:?} for shape {shape:?}")));
    }
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = if kept.is_empty() {
        vec![1]
    } else {
        kept.iter().map(|&a| shape[a]).collect()
    };
    let out_len: usize = out_shape.iter().product();
    let group_size = x.len() / out_len;

    // out stride for each input axis (0 for reduced axes)
    let mut out_stride = vec![0usize; shape.len()];
    let mut acc = 1;
    for &a in kept.iter().rev() {
        out_stride[a] = acc;
        acc *= shape[a];
    }
    let mut out_index = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..x.len() {
        out_index.push(idx.iter().zip(&out_stride).map(|(i, s)| i * s).sum());
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }

    let mut argmax = Vec::new();
    let out = match kind {
        Reduce::Sum | Reduce::Mean => {
            let mut out = vec![T::zero(); out_len];
            for (&o, &v) in out_index.iter().zip(x.data()) {
                out[o] = out[o] + v;
            }
            if kind == Reduce::Mean {
                let n = T::of(group_size as f64);
                out.iter_mut().for_each(|v| *v = *v / n);
            }
            out
        }
        Reduce::Max => {
            let mut best: Vec<Option<usize>> = vec![None; out_len];
            for (i, (&o, &v)) in out_index.iter().zip(x.data()).enumerate() {
                match best[o] {
                    Some(b) if x.data()[b] >= v => {}
                    _ => best[o] = Some(i),
                }
            }
            argmax = best.into_iter().map(|b| b.expect("nonempty group")).collect();
            argmax.iter().map(|&i| x.data()[i]).collect()
        }
    };
    Ok((
        Tensor::new(out_shape, out)?,
        ReduceCache {
            out_index,
            argmax,
            group_size,
        },
    ))
}

pub fn reduce_backward<T: Scalar>(
    input_shape: &[usize],
    cache: &ReduceCache,
    kind: Reduce,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let g = grad_out.data();
    match kind {
        Reduce::Sum => Tensor::from_fn(input_shape, |i| g[cache.out_index[i]]),
        Reduce::Mean => {
            let n = T::of(cache.group_size as f64);
            Tensor::from_fn(input_shape, |i| g[cache.out_index[i]] / n)
        }
        Reduce::Max => {
            let mut dx = Tensor::zeros(input_shape);
            for (o, &i) in cache.argmax.iter().enumerate() {
                dx.data_mut()[i] = g[o];
            }
            dx
        }
    }
}
