use std::sync::Arc;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::ssm::{scan_backward, scan_forward, ScanKernel, ScanTensors};
use crate::tensor::kernels::{self, NormStats};
use crate::tensor::{dims, Scalar, Tensor};

impl<'t, T: Scalar> Var<'t, T> {
    fn same_tape(&self, other: &Var<'_, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes cannot be combined"
        );
    }

    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T) -> T + 'static) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(f);
        self.tape.push_op(out, &[self], move || {
            Box::new(move |g| {
                let gx = Tensor::from_fn(g.shape(), |i| g.data()[i] * df(x.data()[i]));
                Ok(vec![Some(gx)])
            })
        })
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let out = self.value().add(&other.value())?;
        Ok(self.tape.push_op(out, &[self, other], || {
            Box::new(|g| Ok(vec![Some(g.clone()), Some(g.clone())]))
        }))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let out = self.value().sub(&other.value())?;
        Ok(self.tape.push_op(out, &[self, other], || {
            Box::new(|g| Ok(vec![Some(g.clone()), Some(g.scale(-T::one()))]))
        }))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape.push_op(out, &[self, other], move || {
            Box::new(move |g| {
                Ok(vec![
                    Some(g.zip_map(&b, |gv, bv| gv * bv)?),
                    Some(g.zip_map(&a, |gv, av| gv * av)?),
                ])
            })
        }))
    }

    pub fn scale(self, s: f64) -> Var<'t, T> {
        let s = T::lit(s);
        let out = self.value().scale(s);
        self.tape
            .push_op(out, &[self], move || Box::new(move |g| Ok(vec![Some(g.scale(s))])))
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.push_op(Tensor::scalar(x.sum()), &[self], move || {
            Box::new(move |g| Ok(vec![Some(Tensor::full(&shape, g.item()))]))
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape)?;
        Ok(self.tape.push_op(out, &[self], move || {
            Box::new(move |g| Ok(vec![Some(g.clone().reshape(&old)?)]))
        }))
    }

    /// Swaps axes 1 and 2 of a rank-3 value.
    pub fn transpose_12(self) -> Result<Var<'t, T>> {
        let out = self.value().transpose_12()?;
        Ok(self.tape.push_op(out, &[self], || {
            Box::new(|g| Ok(vec![Some(g.transpose_12()?)]))
        }))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(kernels::relu, |x| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn gelu(self) -> Var<'t, T> {
        self.unary(kernels::gelu, kernels::gelu_grad)
    }

    pub fn silu(self) -> Var<'t, T> {
        self.unary(kernels::silu, kernels::silu_grad)
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.unary(kernels::softplus, kernels::sigmoid)
    }

    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        self.conv_impl(weight, bias, stride, pad, false)
    }

    pub fn depthwise_conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        self.conv_impl(weight, bias, stride, pad, true)
    }

    fn conv_impl(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
        depthwise: bool,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&weight);
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let out = if depthwise {
            kernels::depthwise_conv2d(&x, &w, b.as_deref(), stride, pad)?
        } else {
            kernels::conv2d(&x, &w, b.as_deref(), stride, pad)?
        };
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.tape.push_op(out, &parents, move || {
            Box::new(move |g| {
                let (gx, gw, gb) = if depthwise {
                    kernels::depthwise_conv2d_backward(&x, &w, g, stride, pad)?
                } else {
                    kernels::conv2d_backward(&x, &w, g, stride, pad)?
                };
                let mut grads = vec![Some(gx), Some(gw)];
                if has_bias {
                    grads.push(Some(gb));
                }
                Ok(grads)
            })
        }))
    }

    /// Affine map over the last axis; `weight` is `[Dout, Din]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        self.same_tape(&weight);
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let out = kernels::linear(&x, &w, b.as_deref())?;
        let [dout, din] = dims::<2>("linear", w.shape())?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.tape.push_op(out, &parents, move || {
            Box::new(move |g| {
                let rows = x.numel() / din;
                let mut gx = vec![T::zero(); x.numel()];
                let mut gw = vec![T::zero(); w.numel()];
                use kernels::Trans::{N, T as Tr};
                kernels::matmul(rows, dout, din, g.data(), N, w.data(), N, &mut gx, false);
                kernels::matmul(dout, rows, din, g.data(), Tr, x.data(), N, &mut gw, false);
                let mut grads = vec![
                    Some(Tensor::new(x.shape(), gx)?),
                    Some(Tensor::new(w.shape(), gw)?),
                ];
                if has_bias {
                    let mut gb = vec![T::zero(); dout];
                    for row in g.data().chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    grads.push(Some(Tensor::new(&[dout], gb)?));
                }
                Ok(grads)
            })
        }))
    }

    /// Train-mode batch norm over axis 1. Returns the output and the batch
    /// statistics (for the running-average update).
    pub fn batch_norm_train(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
    ) -> Result<(Var<'t, T>, NormStats<T>)> {
        self.norm_impl(gamma, beta, NormKind::BatchTrain)
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
    ) -> Result<Var<'t, T>> {
        let running = (Arc::new(running_mean.clone()), Arc::new(running_var.clone()));
        self.norm_impl(gamma, beta, NormKind::BatchEval(running))
            .map(|(v, _)| v)
    }

    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
        self.norm_impl(gamma, beta, NormKind::Layer).map(|(v, _)| v)
    }

    fn norm_impl(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        kind: NormKind<T>,
    ) -> Result<(Var<'t, T>, NormStats<T>)> {
        let (x, g) = (self.value(), gamma.value());
        let bt = beta.value();
        let (out, stats) = match &kind {
            NormKind::BatchTrain => kernels::batch_norm(&x, &g, &bt, None)?,
            NormKind::BatchEval((rm, rv)) => kernels::batch_norm(&x, &g, &bt, Some((rm, rv)))?,
            NormKind::Layer => kernels::layer_norm(&x, &g, &bt)?,
        };
        let saved = Arc::new(stats.clone());
        let var = self.tape.push_op(out, &[self, gamma, beta], move || {
            Box::new(move |gy| {
                let (gx, gg, gb) = match kind {
                    NormKind::BatchTrain => kernels::batch_norm_backward(gy, &g, &saved, true)?,
                    NormKind::BatchEval(_) => kernels::batch_norm_backward(gy, &g, &saved, false)?,
                    NormKind::Layer => kernels::layer_norm_backward(gy, &g, &saved)?,
                };
                Ok(vec![Some(gx), Some(gg), Some(gb)])
            })
        });
        Ok((var, stats))
    }

    pub fn global_avg_pool(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = kernels::global_avg_pool(&x)?;
        let shape = x.shape().to_vec();
        Ok(self.tape.push_op(out, &[self], move || {
            Box::new(move |g| {
                let s = shape[2] * shape[3];
                let inv = T::one() / T::lit(s as f64);
                Ok(vec![Some(Tensor::from_fn(&shape, |i| g.data()[i / s] * inv))])
            })
        }))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let (loss, grad) = kernels::softmax_cross_entropy(&self.value(), labels)?;
        Ok(self.tape.push_op(Tensor::scalar(loss), &[self], move || {
            Box::new(move |g| Ok(vec![Some(grad.scale(g.item()))]))
        }))
    }

    /// `x[b, ...] + table[...]` for every batch entry `b`.
    pub fn add_batch_broadcast(self, table: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&table);
        let (x, t) = (self.value(), table.value());
        if x.shape().get(1..) != Some(t.shape()) {
            return Err(Error::shape("add_batch_broadcast", x.shape(), t.shape()));
        }
        let n = t.numel();
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] + t.data()[i % n]);
        let tshape = t.shape().to_vec();
        Ok(self.tape.push_op(out, &[self, table], move || {
            Box::new(move |g| {
                let mut gt = vec![T::zero(); n];
                for chunk in g.data().chunks(n) {
                    gt.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v);
                }
                Ok(vec![Some(g.clone()), Some(Tensor::new(&tshape, gt)?)])
            })
        }))
    }

    /// Align-corners bilinear resize of a `[C, H0, W0]` table.
    pub fn resize_bilinear(self, h: usize, w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = kernels::resize_bilinear(&x, h, w)?;
        let (h0, w0) = (x.shape()[1], x.shape()[2]);
        Ok(self.tape.push_op(out, &[self], move || {
            Box::new(move |g| Ok(vec![Some(kernels::resize_bilinear_backward(g, h0, w0)?)]))
        }))
    }

    /// Reorders the last axis: `out[.., j] = x[.., order[j]]`.
    pub fn permute_tokens(self, order: Arc<[usize]>) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = permute_last(&x, &order, false)?;
        Ok(self.tape.push_op(out, &[self], move || {
            Box::new(move |g| Ok(vec![Some(permute_last(g, &order, true)?)]))
        }))
    }
}

enum NormKind<T> {
    BatchTrain,
    BatchEval((Arc<Tensor<T>>, Arc<Tensor<T>>)),
    Layer,
}

/// Gathers (`inverse = false`) or scatters (`inverse = true`) the last axis by
/// `order`.
pub(crate) fn permute_last<T: Scalar>(
    x: &Tensor<T>,
    order: &[usize],
    inverse: bool,
) -> Result<Tensor<T>> {
    let l = *x.shape().last().unwrap_or(&0);
    if l != order.len() {
        return Err(Error::shape("permute_tokens", x.shape(), &[order.len()]));
    }
    let mut out = vec![T::zero(); x.numel()];
    for (src, dst) in x.data().chunks(l.max(1)).zip(out.chunks_mut(l.max(1))) {
        for (j, &o) in order.iter().enumerate() {
            if inverse {
                dst[o] = src[j];
            } else {
                dst[j] = src[o];
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Inputs of the differentiable direction-aware selective scan.
#[derive(Clone)]
pub struct ScanArgs<'t, T> {
    /// `[B, D, L]`
    pub x: Var<'t, T>,
    /// `[B, D, L]`, strictly positive
    pub delta: Var<'t, T>,
    /// `[B, N, L]`
    pub b_seq: Var<'t, T>,
    /// `[B, N, L]`
    pub c_seq: Var<'t, T>,
    /// `[D, N]`
    pub a_log: Var<'t, T>,
    /// `[D]`
    pub d_skip: Var<'t, T>,
    /// `[5, N]`; `None` gives the plain selective scan.
    pub theta: Option<Var<'t, T>>,
    /// Direction code of every token.
    pub dirs: Arc<[u8]>,
    pub kernel: ScanKernel,
}

impl<T: Scalar> Tape<T> {
    /// Selective scan with optional direction-aware input term, recorded with
    /// a hand-written reverse-time backward pass.
    pub fn selective_scan<'t>(&'t self, args: ScanArgs<'t, T>) -> Result<Var<'t, T>> {
        let x = args.x.value();
        let delta = args.delta.value();
        let b = args.b_seq.value();
        let c = args.c_seq.value();
        let a_log = args.a_log.value();
        let d_skip = args.d_skip.value();
        let theta = args.theta.map(|t| t.value());
        let dirs = args.dirs.clone();
        let view = ScanTensors {
            x: &x,
            delta: &delta,
            b_seq: &b,
            c_seq: &c,
            a_log: &a_log,
            d_skip: &d_skip,
            theta: theta.as_deref(),
            dirs: &dirs,
        };
        let (y, states) = scan_forward(&view, args.kernel)?;
        let mut parents = vec![
            args.x,
            args.delta,
            args.b_seq,
            args.c_seq,
            args.a_log,
            args.d_skip,
        ];
        parents.extend(args.theta);
        Ok(self.push_op(y, &parents, move || {
            Box::new(move |gy| {
                let view = ScanTensors {
                    x: &x,
                    delta: &delta,
                    b_seq: &b,
                    c_seq: &c,
                    a_log: &a_log,
                    d_skip: &d_skip,
                    theta: theta.as_deref(),
                    dirs: &dirs,
                };
                let g = scan_backward(&view, &states, gy)?;
                let mut out = vec![
                    Some(g.x),
                    Some(g.delta),
                    Some(g.b_seq),
                    Some(g.c_seq),
                    Some(g.a_log),
                    Some(g.d_skip),
                ];
                if let Some(t) = g.theta {
                    out.push(Some(t));
                }
                Ok(out)
            })
        }))
    }
}
