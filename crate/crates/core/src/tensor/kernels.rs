//! Forward and backward numeric kernels on raw tensors.
//!
//! The autodiff layer wraps these; they are also used directly by the
//! tape-free reference paths in `ssm` and by tests.

use super::{dims, Scalar, Tensor};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    N,
    T,
}

/// `c[m,n] (+)= op(a)[m,k] @ op(b)[k,n]`, all buffers contiguous row-major.
/// With `Trans::T` the operand is stored transposed (`[k,m]` for `a`).
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: Trans,
    b: &[T],
    tb: Trans,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Trans::N => (k as isize, 1),
        Trans::T => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::N => (n as isize, 1),
        Trans::T => (1, k as isize),
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index reachable from the strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Output extent along one axis: `floor((n + 2p - k) / s) + 1`.
    pub fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = n + 2 * pad;
        if stride == 0 || k == 0 || k > padded {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    fn check(
        op: &'static str,
        input: &[usize],
        weight: &[usize],
        stride: usize,
        pad: usize,
        depthwise: bool,
    ) -> Result<Self> {
        let [batch, cin, h, w] = dims::<4>(op, input)?;
        let [cout, wcin, kh, kw] = dims::<4>(op, weight)?;
        let expected_cin = if depthwise { 1 } else { cin };
        if wcin != expected_cin || (depthwise && cout != cin) {
            return Err(Error::shape(op, input, weight));
        }
        let (Some(ho), Some(wo)) = (
            Self::out_extent(h, kh, stride, pad),
            Self::out_extent(w, kw, stride, pad),
        ) else {
            return Err(Error::invalid(
                op,
                format!(
                    "kernel {kh}x{kw} with stride {stride}, padding {pad} does not fit input {h}x{w}"
                ),
            ));
        };
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn conv2d(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        Self::check("conv2d", input, weight, stride, pad, false)
    }

    pub fn depthwise(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        Self::check("depthwise_conv2d", input, weight, stride, pad, true)
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.ho, self.wo]
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input coordinate for output coordinate `o` and kernel tap `k`.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
        let p = (o * stride + k) as isize - pad as isize;
        (p >= 0 && (p as usize) < n).then_some(p as usize)
    }
}

fn check_bias(op: &'static str, bias: Option<&[usize]>, channels: usize) -> Result<()> {
    match bias {
        Some(s) if s != [channels] => Err(Error::shape(op, s, &[channels])),
        _ => Ok(()),
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let l = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let Some(iy) = ConvGeom::src(oy, ki, g.stride, g.pad, g.h) else {
                        dst[oy * g.wo..(oy + 1) * g.wo].fill(T::zero());
                        continue;
                    };
                    for ox in 0..g.wo {
                        dst[oy * g.wo + ox] = match ConvGeom::src(ox, kj, g.stride, g.pad, g.w) {
                            Some(ix) => plane[iy * g.w + ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], gx: &mut [T]) {
    let l = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let Some(iy) = ConvGeom::src(oy, ki, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    for ox in 0..g.wo {
                        if let Some(ix) = ConvGeom::src(ox, kj, g.stride, g.pad, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Standard 2D cross-correlation (no kernel flip).
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::conv2d(input.shape(), weight.shape(), stride, pad)?;
    check_bias("conv2d", bias.map(|b| b.shape()), g.cout)?;
    let k = g.cin * g.kh * g.kw;
    let l = g.ho * g.wo;
    let mut out = vec![T::zero(); g.batch * g.cout * l];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * l]
    };
    for b in 0..g.batch {
        let xb = &input.data()[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let cols_b: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(&g, xb, &mut cols);
            &cols
        };
        let ob = &mut out[b * g.cout * l..(b + 1) * g.cout * l];
        matmul(g.cout, k, l, weight.data(), Trans::N, cols_b, Trans::N, ob, false);
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(l).enumerate() {
                let bv = bias.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(&g.out_shape(), out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::conv2d(input.shape(), weight.shape(), stride, pad)?;
    if grad_out.shape() != g.out_shape() {
        return Err(Error::shape("conv2d_backward", grad_out.shape(), &g.out_shape()));
    }
    let k = g.cin * g.kh * g.kw;
    let l = g.ho * g.wo;
    let in_sz = g.cin * g.h * g.w;
    let mut gx = vec![T::zero(); input.numel()];
    let mut gw = vec![T::zero(); weight.numel()];
    let mut gb = vec![T::zero(); g.cout];
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * l }];
    let mut gcols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * l }];
    for b in 0..g.batch {
        let xb = &input.data()[b * in_sz..(b + 1) * in_sz];
        let gob = &grad_out.data()[b * g.cout * l..(b + 1) * g.cout * l];
        for (co, row) in gob.chunks(l).enumerate() {
            gb[co] += row.iter().copied().sum::<T>();
        }
        let gxb = &mut gx[b * in_sz..(b + 1) * in_sz];
        if g.is_pointwise() {
            matmul(g.cout, l, k, gob, Trans::N, xb, Trans::T, &mut gw, true);
            matmul(k, g.cout, l, weight.data(), Trans::T, gob, Trans::N, gxb, false);
        } else {
            im2col(&g, xb, &mut cols);
            matmul(g.cout, l, k, gob, Trans::N, &cols, Trans::T, &mut gw, true);
            matmul(k, g.cout, l, weight.data(), Trans::T, gob, Trans::N, &mut gcols, false);
            col2im(&g, &gcols, gxb);
        }
    }
    Ok((
        Tensor::new(input.shape(), gx)?,
        Tensor::new(weight.shape(), gw)?,
        Tensor::new(&[g.cout], gb)?,
    ))
}

/// Per-channel 2D cross-correlation; weight is `[C, 1, kh, kw]`.
/// Output indices `o` in `lo..hi` whose source `o * stride + k - pad` lies
/// inside `0..len`.
fn tap_range(out_len: usize, k: usize, stride: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// A run of output pixels in one row that share a kernel tap: output
/// `dst + j` reads input `src + j * stride` for `j < len`.
struct TapRun {
    dst: usize,
    src: usize,
    len: usize,
    tap: usize,
}

/// Every tap run of one depthwise plane. The geometry is identical for all
/// planes, so this is computed once per call.
fn tap_runs(g: &ConvGeom) -> Vec<TapRun> {
    let mut runs = Vec::new();
    for ki in 0..g.kh {
        let (oy_lo, oy_hi) = tap_range(g.ho, ki, g.stride, g.pad, g.h);
        for kj in 0..g.kw {
            let (ox_lo, ox_hi) = tap_range(g.wo, kj, g.stride, g.pad, g.w);
            if ox_lo == ox_hi {
                continue;
            }
            for oy in oy_lo..oy_hi {
                let iy = oy * g.stride + ki - g.pad;
                runs.push(TapRun {
                    dst: oy * g.wo + ox_lo,
                    src: iy * g.w + ox_lo * g.stride + kj - g.pad,
                    len: ox_hi - ox_lo,
                    tap: ki * g.kw + kj,
                });
            }
        }
    }
    runs
}

pub fn depthwise_conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::depthwise(input.shape(), weight.shape(), stride, pad)?;
    check_bias("depthwise_conv2d", bias.map(|b| b.shape()), g.cout)?;
    let mut out = vec![T::zero(); g.batch * g.cout * g.ho * g.wo];
    let (x, w) = (input.data(), weight.data());
    let runs = tap_runs(&g);
    for b in 0..g.batch {
        for c in 0..g.cin {
            let plane = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let kern = &w[c * g.kh * g.kw..][..g.kh * g.kw];
            let dst = &mut out[(b * g.cin + c) * g.ho * g.wo..][..g.ho * g.wo];
            dst.fill(bias.map_or(T::zero(), |t| t.data()[c]));
            for r in &runs {
                let wv = kern[r.tap];
                let drow = &mut dst[r.dst..][..r.len];
                if g.stride == 1 {
                    let src = &plane[r.src..][..r.len];
                    drow.iter_mut().zip(src).for_each(|(d, &v)| *d += wv * v);
                } else {
                    for (j, d) in drow.iter_mut().enumerate() {
                        *d += wv * plane[r.src + j * g.stride];
                    }
                }
            }
        }
    }
    Tensor::new(&g.out_shape(), out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::depthwise(input.shape(), weight.shape(), stride, pad)?;
    if grad_out.shape() != g.out_shape() {
        return Err(Error::shape(
            "depthwise_conv2d_backward",
            grad_out.shape(),
            &g.out_shape(),
        ));
    }
    let mut gx = vec![T::zero(); input.numel()];
    let mut gw = vec![T::zero(); weight.numel()];
    let mut gb = vec![T::zero(); g.cin];
    let (x, w, go) = (input.data(), weight.data(), grad_out.data());
    let runs = tap_runs(&g);
    for b in 0..g.batch {
        for c in 0..g.cin {
            let off_in = (b * g.cin + c) * g.h * g.w;
            let dplane = &go[(b * g.cin + c) * g.ho * g.wo..][..g.ho * g.wo];
            let xplane = &x[off_in..][..g.h * g.w];
            let gxplane = &mut gx[off_in..][..g.h * g.w];
            let kern = &w[c * g.kh * g.kw..][..g.kh * g.kw];
            let gkern = &mut gw[c * g.kh * g.kw..][..g.kh * g.kw];
            gb[c] += dplane.iter().copied().sum::<T>();
            for r in &runs {
                let wv = kern[r.tap];
                let drow = &dplane[r.dst..][..r.len];
                let mut acc = T::zero();
                if g.stride == 1 {
                    let src = &xplane[r.src..][..r.len];
                    let gsrc = &mut gxplane[r.src..][..r.len];
                    for ((gv, &xv), &d) in gsrc.iter_mut().zip(src).zip(drow) {
                        acc += d * xv;
                        *gv += d * wv;
                    }
                } else {
                    for (j, &d) in drow.iter().enumerate() {
                        let xi = r.src + j * g.stride;
                        acc += d * xplane[xi];
                        gxplane[xi] += d * wv;
                    }
                }
                gkern[r.tap] += acc;
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), gx)?,
        Tensor::new(weight.shape(), gw)?,
        Tensor::new(&[g.cin], gb)?,
    ))
}

// ---------------------------------------------------------------------------
// Linear

/// `y[.., o] = sum_i x[.., i] * w[o, i] + b[o]` over the last axis.
pub fn linear<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let [dout, din] = dims::<2>("linear", weight.shape())?;
    if input.shape().last() != Some(&din) {
        return Err(Error::shape("linear", input.shape(), weight.shape()));
    }
    check_bias("linear", bias.map(|b| b.shape()), dout)?;
    let rows = input.numel() / din;
    let mut out = vec![T::zero(); rows * dout];
    matmul(rows, din, dout, input.data(), Trans::N, weight.data(), Trans::T, &mut out, false);
    if let Some(b) = bias {
        for row in out.chunks_mut(dout) {
            row.iter_mut().zip(b.data()).for_each(|(v, &bv)| *v += bv);
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(&shape, out)
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-channel statistics saved by a batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    /// Normalized input, same shape as the input.
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased variance (train mode) or running variance (eval mode).
    pub var: Vec<T>,
}

fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid(op, format!("expected rank >= 2, got {shape:?}")));
    }
    let spatial: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], spatial))
}

/// Batch normalization over axis 1. With `running = None` batch statistics are
/// used (train mode); otherwise the supplied `(mean, var)` (eval mode).
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<(&Tensor<T>, &Tensor<T>)>,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let (b, c, s) = channel_layout("batch_norm", input.shape())?;
    for t in [gamma, beta] {
        if t.shape() != [c] {
            return Err(Error::shape("batch_norm", t.shape(), &[c]));
        }
    }
    let n = b * s;
    if n == 0 {
        return Err(Error::invalid("batch_norm", "empty input"));
    }
    let eps = T::lit(NORM_EPS);
    let x = input.data();
    let (mean, var) = match running {
        Some((rm, rv)) => {
            if rm.shape() != [c] || rv.shape() != [c] {
                return Err(Error::shape("batch_norm", rm.shape(), &[c]));
            }
            (rm.data().to_vec(), rv.data().to_vec())
        }
        None => {
            let nn = T::lit(n as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = T::zero();
                for bi in 0..b {
                    acc += x[(bi * c + ch) * s..][..s].iter().copied().sum::<T>();
                }
                let m = acc / nn;
                let mut acc2 = T::zero();
                for bi in 0..b {
                    for &v in &x[(bi * c + ch) * s..][..s] {
                        acc2 += (v - m) * (v - m);
                    }
                }
                mean[ch] = m;
                var[ch] = acc2 / nn;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * s;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in off..off + s {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = g * h + bt;
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), out)?,
        NormStats {
            xhat: Tensor::new(input.shape(), xhat)?,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Running-statistics update after a train-mode batch-norm pass. Uses the
/// unbiased batch variance.
pub fn update_running_stats<T: Scalar>(
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    stats: &NormStats<T>,
    count: usize,
) -> (Tensor<T>, Tensor<T>) {
    let m = T::lit(BN_MOMENTUM);
    let keep = T::one() - m;
    let correction = if count > 1 {
        T::lit(count as f64 / (count - 1) as f64)
    } else {
        T::one()
    };
    let rm = Tensor::from_fn(running_mean.shape(), |i| {
        keep * running_mean.data()[i] + m * stats.mean[i]
    });
    let rv = Tensor::from_fn(running_var.shape(), |i| {
        keep * running_var.data()[i] + m * stats.var[i] * correction
    });
    (rm, rv)
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batch_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    train: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, s) = channel_layout("batch_norm_backward", grad_out.shape())?;
    let n = T::lit((b * s) as f64);
    let (dy, xh) = (grad_out.data(), stats.xhat.data());
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * s;
            for i in off..off + s {
                gb[ch] += dy[i];
                gg[ch] += dy[i] * xh[i];
            }
        }
    }
    let mut gx = vec![T::zero(); dy.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * s;
            let g = gamma.data()[ch];
            let is = stats.inv_std[ch];
            for i in off..off + s {
                gx[i] = if train {
                    // gb and gg are the per-channel sums of dy and dy * xhat.
                    g * is * (dy[i] - (gb[ch] + xh[i] * gg[ch]) / n)
                } else {
                    g * is * dy[i]
                };
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape(), gx)?,
        Tensor::new(&[c], gg)?,
        Tensor::new(&[c], gb)?,
    ))
}

/// Layer normalization over the last axis.
pub fn layer_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let Some(&d) = input.shape().last() else {
        return Err(Error::invalid("layer_norm", "scalar input"));
    };
    for t in [gamma, beta] {
        if t.shape() != [d] {
            return Err(Error::shape("layer_norm", t.shape(), &[d]));
        }
    }
    if d == 0 {
        return Err(Error::invalid("layer_norm", "empty normalized axis"));
    }
    let eps = T::lit(NORM_EPS);
    let dd = T::lit(d as f64);
    let rows = input.numel() / d;
    let mut out = vec![T::zero(); input.numel()];
    let mut xhat = vec![T::zero(); input.numel()];
    let mut mean = Vec::with_capacity(rows);
    let mut var = Vec::with_capacity(rows);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &input.data()[r * d..(r + 1) * d];
        let m = row.iter().copied().sum::<T>() / dd;
        let v = row.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / dd;
        let is = T::one() / (v + eps).sqrt();
        for i in 0..d {
            let h = (row[i] - m) * is;
            xhat[r * d + i] = h;
            out[r * d + i] = gamma.data()[i] * h + beta.data()[i];
        }
        mean.push(m);
        var.push(v);
        inv_std.push(is);
    }
    Ok((
        Tensor::new(input.shape(), out)?,
        NormStats {
            xhat: Tensor::new(input.shape(), xhat)?,
            inv_std,
            mean,
            var,
        },
    ))
}

pub fn layer_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = gamma.numel();
    let dd = T::lit(d as f64);
    let (dy, xh) = (grad_out.data(), stats.xhat.data());
    let mut gg = vec![T::zero(); d];
    let mut gb = vec![T::zero(); d];
    let mut gx = vec![T::zero(); dy.len()];
    for (r, &is) in stats.inv_std.iter().enumerate() {
        let (dyr, xhr) = (&dy[r * d..(r + 1) * d], &xh[r * d..(r + 1) * d]);
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for i in 0..d {
            gb[i] += dyr[i];
            gg[i] += dyr[i] * xhr[i];
            let g = dyr[i] * gamma.data()[i];
            s1 += g;
            s2 += g * xhr[i];
        }
        for i in 0..d {
            let g = dyr[i] * gamma.data()[i];
            gx[r * d + i] = is * (g - (s1 + xhr[i] * s2) / dd);
        }
    }
    Ok((
        Tensor::new(grad_out.shape(), gx)?,
        Tensor::new(&[d], gg)?,
        Tensor::new(&[d], gb)?,
    ))
}

// ---------------------------------------------------------------------------
// Elementwise activations

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Exact (erf) GeLU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
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

/// `ln(1 + e^x)`, evaluated without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn relu<T: Scalar>(x: T) -> T {
    x.max(T::zero())
}

// ---------------------------------------------------------------------------
// Pooling, loss, resize

pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims::<4>("global_avg_pool", input.shape())?;
    let s = h * w;
    if s == 0 {
        return Err(Error::invalid("global_avg_pool", "empty spatial extent"));
    }
    let inv = T::one() / T::lit(s as f64);
    let data = input
        .data()
        .chunks(s)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[b, c], data)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let [b, k] = dims::<2>("softmax_cross_entropy", logits.shape())?;
    if labels.len() != b {
        return Err(Error::shape("softmax_cross_entropy", logits.shape(), &[labels.len()]));
    }
    if b == 0 {
        return Err(Error::invalid("softmax_cross_entropy", "empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(
            "softmax_cross_entropy",
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    let inv_b = T::one() / T::lit(b as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); b * k];
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + z.ln();
        loss += lse - row[label];
        for j in 0..k {
            let p = (row[j] - lse).exp();
            let onehot = if j == label { T::one() } else { T::zero() };
            grad[i * k + j] = (p - onehot) * inv_b;
        }
    }
    Ok((loss * inv_b, Tensor::new(&[b, k], grad)?))
}

/// Align-corners bilinear sampling weights from `n_in` to `n_out` samples:
/// `(lo, hi, frac)` per output index.
pub fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let src = if n_out > 1 && n_in > 1 {
                o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            } else {
                0.0
            };
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear (align-corners) resize of a `[C, H0, W0]` table to `[C, H, W]`.
pub fn resize_bilinear<T: Scalar>(table: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [c, h0, w0] = dims::<3>("resize_bilinear", table.shape())?;
    if h0 == 0 || w0 == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("resize_bilinear", "empty grid"));
    }
    if (h0, w0) == (h, w) {
        return Ok(table.clone());
    }
    let ty = bilinear_taps(h0, h);
    let tx = bilinear_taps(w0, w);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let src = &table.data()[ch * h0 * w0..][..h0 * w0];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let top = src[y0 * w0 + x0] * (T::one() - fx) + src[y0 * w0 + x1] * fx;
                let bot = src[y1 * w0 + x0] * (T::one() - fx) + src[y1 * w0 + x1] * fx;
                out[(ch * h + oy) * w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

pub fn resize_bilinear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    h0: usize,
    w0: usize,
) -> Result<Tensor<T>> {
    let [c, h, w] = dims::<3>("resize_bilinear_backward", grad_out.shape())?;
    if (h0, w0) == (h, w) {
        return Ok(grad_out.clone());
    }
    let ty = bilinear_taps(h0, h);
    let tx = bilinear_taps(w0, w);
    let mut gin = vec![T::zero(); c * h0 * w0];
    for ch in 0..c {
        let dst = &mut gin[ch * h0 * w0..][..h0 * w0];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let g = grad_out.data()[(ch * h + oy) * w + ox];
                dst[y0 * w0 + x0] += g * (T::one() - fy) * (T::one() - fx);
                dst[y0 * w0 + x1] += g * (T::one() - fy) * fx;
                dst[y1 * w0 + x0] += g * fy * (T::one() - fx);
                dst[y1 * w0 + x1] += g * fy * fx;
            }
        }
    }
    Tensor::new(&[c, h0, w0], gin)
}
