//! Architectural building blocks: stem, FFN block, downsample layer and the
//! multi-directional Mamba (MDM) block.
//!
//! Every block registers its tensors in a [`ParamStore`] under a dotted name
//! prefix and runs its forward pass through a [`Ctx`]. MAC formulas:
//!
//! * convolution: `Ho * Wo * Cout * (Cin / groups) * k^2` (bias not counted)
//! * linear: `in * out`
//! * selective scan, per direction: `3 * L * D * N` (decay, input and readout
//!   terms of every state update) plus `L * D` for the skip term
//! * normalization and activations: not counted (foldable or elementwise)

use rand::Rng;

use crate::autodiff::{ScanArgs, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::params::{Ctx, EntryKind, ParamStore};
use crate::scan::{all_paths, invert_path, GridShape};
use crate::ssm::{dt_rank, SsmParams};
use crate::tensor::{dims, kernels, Scalar, Tensor};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Hidden expansion of the convolutional MLP.
pub const FFN_RATIO: usize = 4;

/// Mamba inner expansion (`D = MAMBA_EXPAND * C`).
pub const MAMBA_EXPAND: usize = 2;

/// SSM state size.
pub const D_STATE: usize = 16;

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub depthwise: bool,
    pub bias: bool,
}

impl Conv {
    fn dense(name: String, cin: usize, cout: usize, kernel: usize, stride: usize, bias: bool) -> Self {
        Self {
            name,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            pad: kernel / 2,
            depthwise: false,
            bias,
        }
    }

    fn depthwise(name: String, channels: usize, bias: bool) -> Self {
        Self {
            name,
            in_channels: channels,
            out_channels: channels,
            kernel: 3,
            stride: 1,
            pad: 1,
            depthwise: true,
            bias,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        let cin = if self.depthwise { 1 } else { self.in_channels };
        [self.out_channels, cin, self.kernel, self.kernel]
    }

    fn register<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        store.insert(
            format!("{}.weight", self.name),
            init::trunc_normal(&self.weight_shape(), INIT_STD, rng),
            EntryKind::Param,
        );
        if self.bias {
            store.insert(
                format!("{}.bias", self.name),
                Tensor::zeros(&[self.out_channels]),
                EntryKind::Param,
            );
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(ctx.param(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        if self.depthwise {
            x.depthwise_conv2d(w, b, self.stride, self.pad)
        } else {
            x.conv2d(w, b, self.stride, self.pad)
        }
    }

    pub fn out_extent(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// MACs for an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let [co, ci, k, _] = self.weight_shape();
        (self.out_extent(h) * self.out_extent(w) * co * ci * k * k) as u64
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub(crate) fn new(name: String, channels: usize) -> Self {
        Self { name, channels }
    }

    pub(crate) fn register<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let c = self.channels;
        store.insert(format!("{}.weight", self.name), Tensor::ones(&[c]), EntryKind::Param);
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[c]), EntryKind::Param);
        store.insert(format!("{}.running_mean", self.name), Tensor::zeros(&[c]), EntryKind::Buffer);
        store.insert(format!("{}.running_var", self.name), Tensor::ones(&[c]), EntryKind::Buffer);
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        ctx.batch_norm(x, &self.name)
    }
}

/// Two stride-2 3x3 convolutions, each followed by BN and ReLU.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
}

impl Stem {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, out_channels: usize, rng: &mut impl Rng) -> Self {
        let mid = out_channels / 2;
        let s = Self {
            conv1: Conv::dense(format!("{prefix}.conv1"), 3, mid, 3, 2, false),
            bn1: BatchNorm::new(format!("{prefix}.bn1"), mid),
            conv2: Conv::dense(format!("{prefix}.conv2"), mid, out_channels, 3, 2, false),
            bn2: BatchNorm::new(format!("{prefix}.bn2"), out_channels),
        };
        s.conv1.register(store, rng);
        s.bn1.register(store);
        s.conv2.register(store, rng);
        s.bn2.register(store);
        s
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let [_, c, h, w] = dims::<4>("stem", &x.shape())?;
        if c != 3 {
            return Err(Error::invalid("stem", format!("expected 3 input channels, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(
                "stem",
                format!("input {h}x{w} must have height and width divisible by 4"),
            ));
        }
        let x = self.bn1.forward(ctx, self.conv1.forward(ctx, x)?)?.relu();
        Ok(self.bn2.forward(ctx, self.conv2.forward(ctx, x)?)?.relu())
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (h1, w1) = (self.conv1.out_extent(h), self.conv1.out_extent(w));
        self.conv1.macs(h, w) + self.conv2.macs(h1, w1)
    }
}

/// `1x1 expand -> BN -> GeLU -> dw 3x3 -> BN -> GeLU -> 1x1 project -> BN`.
#[derive(Clone, Debug)]
pub struct ConvMlp {
    pub expand: Conv,
    pub bn1: BatchNorm,
    pub dw: Conv,
    pub bn2: BatchNorm,
    pub project: Conv,
    pub bn3: BatchNorm,
}

impl ConvMlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let hidden = FFN_RATIO * channels;
        let m = Self {
            expand: Conv::dense(format!("{prefix}.expand"), channels, hidden, 1, 1, false),
            bn1: BatchNorm::new(format!("{prefix}.bn1"), hidden),
            dw: Conv::depthwise(format!("{prefix}.dw"), hidden, false),
            bn2: BatchNorm::new(format!("{prefix}.bn2"), hidden),
            project: Conv::dense(format!("{prefix}.project"), hidden, channels, 1, 1, false),
            bn3: BatchNorm::new(format!("{prefix}.bn3"), channels),
        };
        m.expand.register(store, rng);
        m.bn1.register(store);
        m.dw.register(store, rng);
        m.bn2.register(store);
        m.project.register(store, rng);
        m.bn3.register(store);
        m
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.bn1.forward(ctx, self.expand.forward(ctx, x)?)?.gelu();
        let x = self.bn2.forward(ctx, self.dw.forward(ctx, x)?)?.gelu();
        self.bn3.forward(ctx, self.project.forward(ctx, x)?)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.expand.macs(h, w) + self.dw.macs(h, w) + self.project.macs(h, w)
    }
}

/// Inverted-residual block: `x + ConvMlp(x)`.
#[derive(Clone, Debug)]
pub struct FfnBlock {
    pub mlp: ConvMlp,
}

impl FfnBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: ConvMlp::new(store, &format!("{prefix}.mlp"), channels, rng),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.add(self.mlp.forward(ctx, x)?)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.mlp.macs(h, w)
    }
}

/// Stride-2 3x3 convolution followed by BN.
#[derive(Clone, Debug)]
pub struct DownsampleLayer {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl DownsampleLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let d = Self {
            conv: Conv::dense(format!("{prefix}.conv"), in_channels, out_channels, 3, 2, false),
            bn: BatchNorm::new(format!("{prefix}.bn"), out_channels),
        };
        d.conv.register(store, rng);
        d.bn.register(store);
        d
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.bn.forward(ctx, self.conv.forward(ctx, x)?)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv.macs(h, w)
    }
}

/// Returns the stored `[D, H0, W0]` table if it already matches `grid`,
/// otherwise its align-corners bilinear resize to `grid`.
pub fn positional_embedding<T: Scalar>(grid: GridShape, stored: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, h0, w0] = dims::<3>("positional_embedding", stored.shape())?;
    if (h0, w0) == (grid.height, grid.width) {
        return Ok(stored.clone());
    }
    kernels::resize_bilinear(stored, grid.height, grid.width)
}

/// Multi-directional Mamba block:
///
/// ```text
/// u   = SiLU(dw3x3(in_proj(BN(x)) + pos))
/// m   = BN(out_proj(LN(sum_k scatter_k(scan_k(gather_k(u))))))
/// x1  = x + m
/// out = x1 + ConvMlp(BN(x1))
/// ```
///
/// The selective projections (`delta`, `B`, `C`) act per token, so they are
/// computed once on the grid and then reordered along each path. All four
/// directions share one set of SSM parameters.
#[derive(Clone, Debug)]
pub struct MdmBlock {
    pub prefix: String,
    pub channels: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub rank: usize,
    /// Native grid of the positional table.
    pub pos_grid: GridShape,
    pub norm1: BatchNorm,
    pub in_proj: Conv,
    pub dw: Conv,
    pub out_proj: Conv,
    pub out_bn: BatchNorm,
    pub norm2: BatchNorm,
    pub mlp: ConvMlp,
}

impl MdmBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        pos_grid: GridShape,
        rng: &mut impl Rng,
    ) -> Self {
        let d = MAMBA_EXPAND * channels;
        let name = |f: &str| format!("{prefix}.{f}");
        let norm1 = BatchNorm::new(name("norm1"), channels);
        norm1.register(store);
        let in_proj = Conv::dense(name("in_proj"), channels, d, 1, 1, false);
        in_proj.register(store, rng);
        store.insert(
            name("pos_embed"),
            init::trunc_normal(&[d, pos_grid.height, pos_grid.width], INIT_STD, rng),
            EntryKind::Param,
        );
        let dw = Conv::depthwise(name("dw"), d, true);
        dw.register(store, rng);
        let rank = dt_rank(channels);
        let ssm = SsmParams::<T>::init(d, D_STATE, rank, rng);
        for (field, t) in [
            ("a_log", ssm.a_log),
            ("d_skip", ssm.d_skip),
            ("w_b", ssm.w_b),
            ("w_c", ssm.w_c),
            ("w_dt_down", ssm.w_dt_down),
            ("w_dt_up", ssm.w_dt_up),
            ("b_delta", ssm.b_delta),
            ("theta", ssm.theta),
        ] {
            store.insert(name(&format!("ssm.{field}")), t, EntryKind::Param);
        }
        store.insert(name("norm.weight"), Tensor::ones(&[d]), EntryKind::Param);
        store.insert(name("norm.bias"), Tensor::zeros(&[d]), EntryKind::Param);
        let out_proj = Conv::dense(name("out_proj"), d, channels, 1, 1, false);
        out_proj.register(store, rng);
        let out_bn = BatchNorm::new(name("out_bn"), channels);
        out_bn.register(store);
        let norm2 = BatchNorm::new(name("norm2"), channels);
        norm2.register(store);
        let mlp = ConvMlp::new(store, &name("mlp"), channels, rng);
        Self {
            prefix: prefix.to_string(),
            channels,
            d_inner: d,
            d_state: D_STATE,
            rank,
            pos_grid,
            norm1,
            in_proj,
            dw,
            out_proj,
            out_bn,
            norm2,
            mlp,
        }
    }

    pub fn name(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    /// The block's SSM parameters, copied out of `store`.
    pub fn ssm_params<T: Scalar>(&self, store: &ParamStore<T>) -> Result<SsmParams<T>> {
        let get = |f: &str| -> Result<Tensor<T>> { Ok((**store.get(&self.name(&format!("ssm.{f}")))?).clone()) };
        Ok(SsmParams {
            a_log: get("a_log")?,
            d_skip: get("d_skip")?,
            w_b: get("w_b")?,
            w_c: get("w_c")?,
            w_dt_down: get("w_dt_down")?,
            w_dt_up: get("w_dt_up")?,
            b_delta: get("b_delta")?,
            theta: get("theta")?,
        })
    }

    /// `[O, I]` weight applied per token to a `[B, I, L, 1]` sequence.
    fn token_mix<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        seq: Var<'t, T>,
        field: &str,
        bias: Option<&str>,
    ) -> Result<Var<'t, T>> {
        let w = ctx.param(&self.name(&format!("ssm.{field}")))?;
        let [o, i] = dims::<2>("mdm_block", &w.shape())?;
        let w = w.reshape(&[o, i, 1, 1])?;
        let b = match bias {
            Some(f) => Some(ctx.param(&self.name(&format!("ssm.{f}")))?),
            None => None,
        };
        seq.conv2d(w, b, 1, 0)
    }

    /// Mamba branch output before the residual add.
    pub fn mamba_branch<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let [b, _, h, w] = dims::<4>("mdm_block", &x.shape())?;
        let grid = GridShape::new(h, w)?;
        let (d, l) = (self.d_inner, grid.len());

        let u = self.in_proj.forward(ctx, self.norm1.forward(ctx, x)?)?;
        let mut pos = ctx.param(&self.name("pos_embed"))?;
        if (h, w) != (self.pos_grid.height, self.pos_grid.width) {
            pos = pos.resize_bilinear(h, w)?;
        }
        let u = self.dw.forward(ctx, u.add_batch_broadcast(pos)?)?.silu();

        let tokens = u.reshape(&[b, d, l, 1])?;
        let low = self.token_mix(ctx, tokens, "w_dt_down", None)?;
        let delta = self
            .token_mix(ctx, low, "w_dt_up", Some("b_delta"))?
            .softplus()
            .reshape(&[b, d, l])?;
        let b_seq = self.token_mix(ctx, tokens, "w_b", None)?.reshape(&[b, self.d_state, l])?;
        let c_seq = self.token_mix(ctx, tokens, "w_c", None)?.reshape(&[b, self.d_state, l])?;
        let x_seq = tokens.reshape(&[b, d, l])?;
        let a_log = ctx.param(&self.name("ssm.a_log"))?;
        let d_skip = ctx.param(&self.name("ssm.d_skip"))?;
        let theta = ctx.param(&self.name("ssm.theta"))?;

        let mut total: Option<Var<'t, T>> = None;
        for path in all_paths(grid) {
            let order = path.order.clone();
            let y = ctx.tape.selective_scan(ScanArgs {
                x: x_seq.permute_tokens(order.clone())?,
                delta: delta.permute_tokens(order.clone())?,
                b_seq: b_seq.permute_tokens(order.clone())?,
                c_seq: c_seq.permute_tokens(order.clone())?,
                a_log,
                d_skip,
                theta: Some(theta),
                dirs: path.dir_codes(),
                kernel: ctx.scan_kernel,
            })?;
            let back = y.permute_tokens(invert_path(&order).into())?;
            total = Some(match total {
                Some(t) => t.add(back)?,
                None => back,
            });
        }
        let total = total.expect("four paths");

        let normed = total.transpose_12()?.layer_norm(
            ctx.param(&self.name("norm.weight"))?,
            ctx.param(&self.name("norm.bias"))?,
        )?;
        let mixed = normed.transpose_12()?.reshape(&[b, d, h, w])?;
        self.out_bn.forward(ctx, self.out_proj.forward(ctx, mixed)?)
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let x1 = x.add(self.mamba_branch(ctx, x)?)?;
        x1.add(self.mlp.forward(ctx, self.norm2.forward(ctx, x1)?)?)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let l = (h * w) as u64;
        let (d, n, r) = (self.d_inner as u64, self.d_state as u64, self.rank as u64);
        let projections = l * (2 * d * r + 2 * n * d);
        let scans = 4 * (3 * l * d * n + l * d);
        self.in_proj.macs(h, w)
            + self.dw.macs(h, w)
            + projections
            + scans
            + self.out_proj.macs(h, w)
            + self.mlp.macs(h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pos_embedding_identity_and_upsample() {
        let t = Tensor::<f64>::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(positional_embedding(GridShape::new(2, 2).unwrap(), &t).unwrap(), t);
        let up = positional_embedding(GridShape::new(3, 3).unwrap(), &t).unwrap();
        assert!((up.data()[4] - 2.5).abs() < 1e-12);
        let c = Tensor::<f64>::full(&[2, 3, 3], 0.7);
        let r = positional_embedding(GridShape::new(5, 2).unwrap(), &c).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn conv_macs_definition() {
        let c = Conv::dense("c".into(), 8, 8, 1, 1, false);
        assert_eq!(c.macs(5, 7), 5 * 7 * 64);
    }
}
