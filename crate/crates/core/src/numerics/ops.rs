//! Differentiable primitives.
//!
//! Each forward function has a matching `*_backward` that maps the gradient
//! of a scalar loss with respect to the output onto gradients with respect
//! to each input. Image-like tensors use `[H, W, C]` layout; convolution
//! kernels are `[3, 3, C_in, C_out]`.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Negative-side slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Stabilizer inside the pixel-norm square root.
pub const PIXEL_NORM_EPS: f64 = 1e-8;

fn finite_out(op: &'static str, t: Tensor) -> Result<Tensor> {
    t.ensure_finite(op)?;
    Ok(t)
}

fn zip_with(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    a.ensure_same_shape(b, op)?;
    a.ensure_finite(op)?;
    b.ensure_finite(op)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    finite_out(op, Tensor::from_raw(a.shape().to_vec(), data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn add_backward(grad: &Tensor) -> (Tensor, Tensor) {
    (grad.clone(), grad.clone())
}

pub fn sub_backward(grad: &Tensor) -> (Tensor, Tensor) {
    (grad.clone(), grad.map(|g| -g))
}

pub fn mul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((mul(grad, b)?, mul(grad, a)?))
}

pub fn scale(a: &Tensor, s: f64) -> Result<Tensor> {
    a.ensure_finite("scale")?;
    if !s.is_finite() {
        return Err(Error::NonFinite { op: "scale" });
    }
    finite_out("scale", a.map(|v| v * s))
}

pub fn scale_backward(s: f64, grad: &Tensor) -> Tensor {
    grad.map(|g| g * s)
}

pub fn add_scalar(a: &Tensor, s: f64) -> Result<Tensor> {
    a.ensure_finite("add_scalar")?;
    if !s.is_finite() {
        return Err(Error::NonFinite { op: "add_scalar" });
    }
    finite_out("add_scalar", a.map(|v| v + s))
}

pub fn add_scalar_backward(grad: &Tensor) -> Tensor {
    grad.clone()
}

pub fn sum(a: &Tensor) -> f64 {
    a.data().iter().sum()
}

pub fn sum_backward(a: &Tensor, grad: f64) -> Tensor {
    Tensor::from_raw(a.shape().to_vec(), vec![grad; a.len()])
}

pub fn l2_norm(a: &Tensor) -> f64 {
    a.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Gradient of the Euclidean norm; zero at the origin.
pub fn l2_norm_backward(a: &Tensor, grad: f64) -> Tensor {
    let n = l2_norm(a);
    if n == 0.0 {
        return a.map(|_| 0.0);
    }
    a.map(|v| grad * v / n)
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape()[..] {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape()))),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, n) = matrix_dims("matmul", b)?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: [{m}x{k}] * [{k2}x{n}]"),
        ));
    }
    a.ensure_finite("matmul")?;
    b.ensure_finite("matmul")?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for (i, row) in out.chunks_exact_mut(n).enumerate() {
        for (p, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
            for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    finite_out("matmul", Tensor::from_raw(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = matrix_dims("transpose", a)?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Ok(Tensor::from_raw(vec![n, m], out))
}

/// Returns `(dL/dA, dL/dB)` for `C = A B`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let ga = matmul(grad, &transpose(b)?)?;
    let gb = matmul(&transpose(a)?, grad)?;
    Ok((ga, gb))
}

/// Per-channel spatial mean of an `[H, W, C]` tensor.
pub fn channel_mean(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.hwc("channel_mean")?;
    x.ensure_finite("channel_mean")?;
    let mut out = vec![0.0; c];
    for px in x.data().chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let n = (h * w) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(Tensor::from_raw(vec![c], out))
}

pub fn channel_mean_backward(shape: &[usize], grad: &Tensor) -> Result<Tensor> {
    let [h, w, c] = shape[..] else {
        return Err(Error::shape("channel_mean_backward", format!("{shape:?}")));
    };
    if grad.shape() != [c] {
        return Err(Error::shape(
            "channel_mean_backward",
            format!("gradient {:?} for {c} channels", grad.shape()),
        ));
    }
    let n = (h * w) as f64;
    let row: Vec<f64> = grad.data().iter().map(|g| g / n).collect();
    Ok(Tensor::from_raw(shape.to_vec(), row.repeat(h * w)))
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w, c) = x.hwc("upsample_nearest")?;
    if factor == 0 {
        return Err(Error::invalid("upsample_nearest", "factor must be positive"));
    }
    x.ensure_finite("upsample_nearest")?;
    let (oh, ow) = (h * factor, w * factor);
    let d = x.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        let sy = y / factor;
        for xx in 0..ow {
            let s = (sy * w + xx / factor) * c;
            out.extend_from_slice(&d[s..s + c]);
        }
    }
    Ok(Tensor::from_raw(vec![oh, ow, c], out))
}

/// Sums each `factor x factor` output block back onto its source pixel.
pub fn upsample_nearest_backward(grad: &Tensor, factor: usize) -> Result<Tensor> {
    let (oh, ow, c) = grad.hwc("upsample_nearest_backward")?;
    if factor == 0 || oh % factor != 0 || ow % factor != 0 {
        return Err(Error::Indivisible {
            op: "upsample_nearest_backward",
            height: oh,
            width: ow,
            divisor: factor,
        });
    }
    let (h, w) = (oh / factor, ow / factor);
    let mut out = vec![0.0; h * w * c];
    let g = grad.data();
    for y in 0..oh {
        for xx in 0..ow {
            let dst = ((y / factor) * w + xx / factor) * c;
            let src = (y * ow + xx) * c;
            for (o, v) in out[dst..dst + c].iter_mut().zip(&g[src..src + c]) {
                *o += v;
            }
        }
    }
    Ok(Tensor::from_raw(vec![h, w, c], out))
}

/// Non-overlapping `factor x factor` box average.
pub fn mean_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w, c) = x.hwc("mean_pool")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Indivisible {
            op: "mean_pool",
            height: h,
            width: w,
            divisor: factor,
        });
    }
    x.ensure_finite("mean_pool")?;
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; oh * ow * c];
    let d = x.data();
    for y in 0..h {
        for xx in 0..w {
            let dst = ((y / factor) * ow + xx / factor) * c;
            let src = (y * w + xx) * c;
            for (o, v) in out[dst..dst + c].iter_mut().zip(&d[src..src + c]) {
                *o += v;
            }
        }
    }
    let area = (factor * factor) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    Ok(Tensor::from_raw(vec![oh, ow, c], out))
}

pub fn mean_pool_backward(grad: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("mean_pool_backward", "factor must be positive"));
    }
    let up = upsample_nearest(grad, factor)?;
    let area = (factor * factor) as f64;
    Ok(up.map(|v| v / area))
}

fn conv_dims(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (h, w, cin) = x.hwc("conv3x3")?;
    let [3, 3, kin, cout] = kernel.shape()[..] else {
        return Err(Error::shape(
            "conv3x3",
            format!("kernel must be [3, 3, C_in, C_out], got {:?}", kernel.shape()),
        ));
    };
    if kin != cin {
        return Err(Error::shape(
            "conv3x3",
            format!("input has {cin} channels, kernel expects {kin}"),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv3x3",
            format!("bias {:?} for {cout} output channels", bias.shape()),
        ));
    }
    Ok((h, w, cin, cout))
}

#[inline]
fn clamp_index(i: usize, delta: isize, n: usize) -> usize {
    (i as isize + delta).clamp(0, n as isize - 1) as usize
}

/// Stride-1 3x3 convolution with edge-replicate "same" padding.
///
/// Replicate padding maps a spatially constant input to a spatially
/// constant output.
pub fn conv3x3(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, cin, cout) = conv_dims(x, kernel, bias)?;
    x.ensure_finite("conv3x3")?;
    kernel.ensure_finite("conv3x3")?;
    bias.ensure_finite("conv3x3")?;
    let (xd, kd, bd) = (x.data(), kernel.data(), bias.data());
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            let acc = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            acc.copy_from_slice(bd);
            for ky in 0..3 {
                let sy = clamp_index(y, ky as isize - 1, h);
                for kx in 0..3 {
                    let sx = clamp_index(xx, kx as isize - 1, w);
                    let inp = &xd[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                    let taps = &kd[(ky * 3 + kx) * cin * cout..(ky * 3 + kx + 1) * cin * cout];
                    for (&v, wrow) in inp.iter().zip(taps.chunks_exact(cout)) {
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += v * wv;
                        }
                    }
                }
            }
        }
    }
    finite_out("conv3x3", Tensor::from_raw(vec![h, w, cout], out))
}

/// Gradient of [`conv3x3`] with respect to its input only.
pub fn conv3x3_backward_input(x_shape: &[usize], kernel: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let [h, w, cin] = x_shape[..] else {
        return Err(Error::shape("conv3x3_backward", format!("{x_shape:?}")));
    };
    let [3, 3, kin, cout] = kernel.shape()[..] else {
        return Err(Error::shape("conv3x3_backward", "kernel must be [3, 3, C_in, C_out]"));
    };
    if kin != cin || grad.shape() != [h, w, cout] {
        return Err(Error::shape(
            "conv3x3_backward",
            format!("gradient {:?} vs input {x_shape:?}", grad.shape()),
        ));
    }
    let gd = grad.data();
    // Per tap, store the kernel as [C_out][C_in] so the inner loop runs along C_in.
    let block = cin * cout;
    let mut kt = vec![0.0; 9 * block];
    for (tap, src) in kernel.data().chunks_exact(block).enumerate() {
        for ci in 0..cin {
            for co in 0..cout {
                kt[tap * block + co * cin + ci] = src[ci * cout + co];
            }
        }
    }
    let mut gx = vec![0.0; h * w * cin];
    for y in 0..h {
        for xx in 0..w {
            let g = &gd[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            for ky in 0..3 {
                let sy = clamp_index(y, ky as isize - 1, h);
                for kx in 0..3 {
                    let sx = clamp_index(xx, kx as isize - 1, w);
                    let dst = &mut gx[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                    let taps = &kt[(ky * 3 + kx) * block..(ky * 3 + kx + 1) * block];
                    for (&gv, wcol) in g.iter().zip(taps.chunks_exact(cin)) {
                        for (d, &wv) in dst.iter_mut().zip(wcol) {
                            *d += gv * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(x_shape.to_vec(), gx))
}

/// Gradients of [`conv3x3`] with respect to kernel and bias.
pub fn conv3x3_backward_params(x: &Tensor, kernel_shape: &[usize], grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w, cin) = x.hwc("conv3x3_backward")?;
    let [3, 3, kin, cout] = kernel_shape[..] else {
        return Err(Error::shape("conv3x3_backward", "kernel must be [3, 3, C_in, C_out]"));
    };
    if kin != cin || grad.shape() != [h, w, cout] {
        return Err(Error::shape(
            "conv3x3_backward",
            format!("gradient {:?} vs input {:?}", grad.shape(), x.shape()),
        ));
    }
    let (xd, gd) = (x.data(), grad.data());
    let mut gk = vec![0.0; 9 * cin * cout];
    let mut gb = vec![0.0; cout];
    for y in 0..h {
        for xx in 0..w {
            let g = &gd[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            for (b, v) in gb.iter_mut().zip(g) {
                *b += v;
            }
            for ky in 0..3 {
                let sy = clamp_index(y, ky as isize - 1, h);
                for kx in 0..3 {
                    let sx = clamp_index(xx, kx as isize - 1, w);
                    let inp = &xd[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                    let taps = &mut gk[(ky * 3 + kx) * cin * cout..(ky * 3 + kx + 1) * cin * cout];
                    for (&v, wrow) in inp.iter().zip(taps.chunks_exact_mut(cout)) {
                        for (t, gv) in wrow.iter_mut().zip(g) {
                            *t += v * gv;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_raw(kernel_shape.to_vec(), gk),
        Tensor::from_raw(vec![cout], gb),
    ))
}

/// Slot `a` of the merged 2-tap kernel that 3x3 tap `k` falls into, for
/// output parity `p`.
#[inline]
fn merged_slot(p: usize, k: usize) -> usize {
    (p + k + 1) / 2 - p
}

/// Folds a 3x3 kernel into four parity-specific 2x2 kernels, laid out
/// `[py][px][a][b][C_in][C_out]`, or `[..][C_out][C_in]` when `transposed`.
fn merged_kernels(kernel: &Tensor, cin: usize, cout: usize, transposed: bool) -> Vec<f64> {
    let kd = kernel.data();
    let block = cin * cout;
    let mut out = vec![0.0; 16 * block];
    for py in 0..2 {
        for px in 0..2 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (a, b) = (merged_slot(py, ky), merged_slot(px, kx));
                    let dst = (((py * 2 + px) * 2 + a) * 2 + b) * block;
                    let src = (ky * 3 + kx) * block;
                    for ci in 0..cin {
                        for co in 0..cout {
                            let idx = if transposed { co * cin + ci } else { ci * cout + co };
                            out[dst + idx] += kd[src + ci * cout + co];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `conv3x3(upsample_nearest(x, 2), kernel, bias)` without materializing
/// the upsampled map.
///
/// Each output parity class sees the low-resolution input through a 2x2
/// window, so the 3x3 kernel folds into four 2x2 kernels. Edge-replicate
/// padding commutes with nearest upsampling, so borders agree exactly.
pub fn upsample2_conv3x3(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, cin, cout) = conv_dims(x, kernel, bias)?;
    x.ensure_finite("upsample2_conv3x3")?;
    kernel.ensure_finite("upsample2_conv3x3")?;
    bias.ensure_finite("upsample2_conv3x3")?;
    let merged = merged_kernels(kernel, cin, cout, false);
    let block = cin * cout;
    let (xd, bd) = (x.data(), bias.data());
    let ow = 2 * w;
    let mut out = vec![0.0; 4 * h * w * cout];
    for y in 0..h {
        for py in 0..2 {
            let rows = [clamp_index(y + py, -1, h), clamp_index(y + py, 0, h)];
            for xx in 0..w {
                for px in 0..2 {
                    let cols = [clamp_index(xx + px, -1, w), clamp_index(xx + px, 0, w)];
                    let o = ((2 * y + py) * ow + 2 * xx + px) * cout;
                    let acc = &mut out[o..o + cout];
                    acc.copy_from_slice(bd);
                    for (a, &sy) in rows.iter().enumerate() {
                        for (b, &sx) in cols.iter().enumerate() {
                            let inp = &xd[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                            let base = (((py * 2 + px) * 2 + a) * 2 + b) * block;
                            let taps = &merged[base..base + block];
                            for (&v, wrow) in inp.iter().zip(taps.chunks_exact(cout)) {
                                for (s, &wv) in acc.iter_mut().zip(wrow) {
                                    *s += v * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    finite_out("upsample2_conv3x3", Tensor::from_raw(vec![2 * h, ow, cout], out))
}

/// Gradient of [`upsample2_conv3x3`] with respect to its (low-resolution) input.
pub fn upsample2_conv3x3_backward_input(x_shape: &[usize], kernel: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let [h, w, cin] = x_shape[..] else {
        return Err(Error::shape("upsample2_conv3x3_backward", format!("{x_shape:?}")));
    };
    let [3, 3, kin, cout] = kernel.shape()[..] else {
        return Err(Error::shape("upsample2_conv3x3_backward", "kernel must be [3, 3, C_in, C_out]"));
    };
    if kin != cin || grad.shape() != [2 * h, 2 * w, cout] {
        return Err(Error::shape(
            "upsample2_conv3x3_backward",
            format!("gradient {:?} vs input {x_shape:?}", grad.shape()),
        ));
    }
    let merged = merged_kernels(kernel, cin, cout, true);
    let block = cin * cout;
    let gd = grad.data();
    let ow = 2 * w;
    let mut gx = vec![0.0; h * w * cin];
    for y in 0..h {
        for py in 0..2 {
            let rows = [clamp_index(y + py, -1, h), clamp_index(y + py, 0, h)];
            for xx in 0..w {
                for px in 0..2 {
                    let cols = [clamp_index(xx + px, -1, w), clamp_index(xx + px, 0, w)];
                    let o = ((2 * y + py) * ow + 2 * xx + px) * cout;
                    let g = &gd[o..o + cout];
                    for (a, &sy) in rows.iter().enumerate() {
                        for (b, &sx) in cols.iter().enumerate() {
                            let dst = &mut gx[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                            let base = (((py * 2 + px) * 2 + a) * 2 + b) * block;
                            let taps = &merged[base..base + block];
                            for (&gv, wcol) in g.iter().zip(taps.chunks_exact(cin)) {
                                for (d, &wv) in dst.iter_mut().zip(wcol) {
                                    *d += gv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(x_shape.to_vec(), gx))
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    x.ensure_finite("leaky_relu")?;
    Ok(x.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v }))
}

/// Takes the forward *input* `x`.
pub fn leaky_relu_backward(x: &Tensor, grad: &Tensor) -> Result<Tensor> {
    x.ensure_same_shape(grad, "leaky_relu_backward")?;
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { LEAKY_SLOPE * g })
        .collect();
    Ok(Tensor::from_raw(x.shape().to_vec(), data))
}

pub fn tanh(x: &Tensor) -> Result<Tensor> {
    x.ensure_finite("tanh")?;
    Ok(x.map(f64::tanh))
}

/// Takes the forward *output* `y = tanh(x)`.
pub fn tanh_backward(y: &Tensor, grad: &Tensor) -> Result<Tensor> {
    y.ensure_same_shape(grad, "tanh_backward")?;
    let data = y
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&t, &g)| g * (1.0 - t * t))
        .collect();
    Ok(Tensor::from_raw(y.shape().to_vec(), data))
}

/// Normalizes each vector along the last axis to unit root-mean-square.
pub fn pixel_norm(x: &Tensor) -> Result<Tensor> {
    x.ensure_finite("pixel_norm")?;
    let c = *x.shape().last().expect("rank >= 1");
    let mut out = x.data().to_vec();
    for v in out.chunks_exact_mut(c) {
        let r = (v.iter().map(|a| a * a).sum::<f64>() / c as f64 + PIXEL_NORM_EPS).sqrt();
        v.iter_mut().for_each(|a| *a /= r);
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), out))
}

/// Takes the forward *input* `x`.
pub fn pixel_norm_backward(x: &Tensor, grad: &Tensor) -> Result<Tensor> {
    x.ensure_same_shape(grad, "pixel_norm_backward")?;
    let c = *x.shape().last().expect("rank >= 1");
    let mut out = vec![0.0; x.len()];
    for ((o, xv), g) in out
        .chunks_exact_mut(c)
        .zip(x.data().chunks_exact(c))
        .zip(grad.data().chunks_exact(c))
    {
        let r = (xv.iter().map(|a| a * a).sum::<f64>() / c as f64 + PIXEL_NORM_EPS).sqrt();
        let gy: f64 = g.iter().zip(xv).map(|(a, b)| a * b / r).sum::<f64>() / c as f64;
        for ((ov, &gv), &xi) in o.iter_mut().zip(g).zip(xv) {
            *ov = (gv - xi / r * gy) / r;
        }
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), out))
}

/// Row-wise softmax of `temperature * m`.
///
/// `temperature` multiplies the logits: large values sharpen rows toward
/// one-hot, values near zero flatten them toward uniform.
pub fn softmax_rows(m: &Tensor, temperature: f64) -> Result<Tensor> {
    let (_, k) = matrix_dims("softmax_rows", m)?;
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(
            "softmax_rows",
            format!("temperature must be positive and finite, got {temperature}"),
        ));
    }
    m.ensure_finite("softmax_rows")?;
    let mut out = m.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (temperature * (*v - max)).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(Tensor::from_raw(m.shape().to_vec(), out))
}

/// Takes the forward *output* `p`.
pub fn softmax_rows_backward(p: &Tensor, temperature: f64, grad: &Tensor) -> Result<Tensor> {
    let (_, k) = matrix_dims("softmax_rows_backward", p)?;
    p.ensure_same_shape(grad, "softmax_rows_backward")?;
    let mut out = vec![0.0; p.len()];
    for ((o, pr), gr) in out
        .chunks_exact_mut(k)
        .zip(p.data().chunks_exact(k))
        .zip(grad.data().chunks_exact(k))
    {
        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((ov, &pv), &gv) in o.iter_mut().zip(pr).zip(gr) {
            *ov = temperature * pv * (gv - dot);
        }
    }
    Ok(Tensor::from_raw(p.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[2, 2], &[1.5, -2.0, 0.25, 7.0]);
        let i = Tensor::identity(2).unwrap();
        assert_eq!(matmul(&i, &a).unwrap(), a);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[2, 3]).unwrap();
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn elementwise_rejects_shape_mismatch() {
        let a = Tensor::zeros(&[2]).unwrap();
        let b = Tensor::zeros(&[3]).unwrap();
        assert!(add(&a, &b).is_err());
        assert!(mul(&a, &b).is_err());
    }

    #[test]
    fn tanh_at_zero() {
        let z = Tensor::zeros(&[2, 3]).unwrap();
        let y = tanh(&z).unwrap();
        assert_eq!(y, z);
        let g = tanh_backward(&y, &Tensor::ones(&[2, 3]).unwrap()).unwrap();
        assert_eq!(g, Tensor::ones(&[2, 3]).unwrap());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&t(&[1, 3], &[0.7, 0.7, 0.7]), 3.0).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let p = softmax_rows(&t(&[1, 2], &[1.0, 0.0]), 100.0).unwrap();
        assert!(p.data()[0] > 1.0 - 1e-9);
        let expected = 1.0 / (1.0 + (-100.0f64).exp());
        assert!((p.data()[0] - expected).abs() < 1e-15);
        let p = softmax_rows(&t(&[1, 2], &[2f64.ln(), 0.0]), 1.0).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-9);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let m = Tensor::zeros(&[1, 2]).unwrap();
        assert!(softmax_rows(&m, 0.0).is_err());
        assert!(softmax_rows(&m, -1.0).is_err());
    }

    #[test]
    fn softmax_overflow_safe() {
        let m = t(&[2, 3], &[1e4, -1e4, 9999.0, -1e4, -1e4, -1e4]);
        let p = softmax_rows(&m, 1.0).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let x = t(&[2, 2, 1], &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(mean_pool(&x, 2).unwrap().data(), &[0.5]);
        assert!(matches!(mean_pool(&x, 3), Err(Error::Indivisible { .. })));
        let up = upsample_nearest(&x, 2).unwrap();
        assert_eq!(up.shape(), &[4, 4, 1]);
        assert_eq!(up.at(&[1, 2, 0]), 1.0);
    }

    #[test]
    fn conv_of_constant_is_constant() {
        let x = Tensor::full(&[5, 4, 2], 0.3).unwrap();
        let k = Tensor::new(vec![3, 3, 2, 3], (0..54).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let b = t(&[3], &[0.1, -0.2, 0.3]);
        let y = conv3x3(&x, &k, &b).unwrap();
        for px in y.data().chunks(3) {
            for (a, b) in px.iter().zip(&y.data()[..3]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fused_upsample_conv_matches_composition() {
        let x = Tensor::new(vec![3, 5, 2], (0..30).map(|i| (i as f64 * 0.71).sin()).collect()).unwrap();
        let k = Tensor::new(vec![3, 3, 2, 3], (0..54).map(|i| (i as f64 * 0.29).cos()).collect()).unwrap();
        let b = t(&[3], &[0.05, -0.1, 0.2]);
        let fused = upsample2_conv3x3(&x, &k, &b).unwrap();
        let plain = conv3x3(&upsample_nearest(&x, 2).unwrap(), &k, &b).unwrap();
        assert_eq!(fused.shape(), plain.shape());
        for (a, b) in fused.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let g = Tensor::new(vec![6, 10, 3], (0..180).map(|i| (i as f64 * 0.13).sin()).collect()).unwrap();
        let gf = upsample2_conv3x3_backward_input(x.shape(), &k, &g).unwrap();
        let gp = upsample_nearest_backward(&conv3x3_backward_input(&[6, 10, 2], &k, &g).unwrap(), 2).unwrap();
        for (a, b) in gf.data().iter().zip(gp.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[4, 4, 2]).unwrap();
        let k = Tensor::zeros(&[3, 3, 3, 1]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        assert!(conv3x3(&x, &k, &b).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let bad = Tensor::from_raw(vec![2], vec![1.0, f64::INFINITY]);
        assert!(matches!(tanh(&bad), Err(Error::NonFinite { .. })));
        assert!(matches!(scale(&bad, 2.0), Err(Error::NonFinite { .. })));
    }
}
