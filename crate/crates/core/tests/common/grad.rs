//! Finite-difference cases shared by the gradient tests and the acceptance
//! run. Every case is 64-bit and uses the default tolerance of 1e-3.

use std::sync::Arc;

use rand::Rng;
use vcmamba::autodiff::gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
use vcmamba::autodiff::ScanArgs;
use vcmamba::blocks::{FfnBlock, MdmBlock};
use vcmamba::params::Ctx;
use vcmamba::scan::{generate_path, GridShape, PathId};
use vcmamba::ssm::ScanKernel;
use vcmamba::{Mode, Model, ModelSpec, ParamStore, Result, Tape, Tensor, Var};

use super::{randomize_norms, rng, uniform};

pub type OpFn = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: OpFn,
}

fn case(name: &'static str, shapes: &[&[usize]], f: OpFn) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f,
    }
}

/// `sum(y * probe)` for a fixed random probe, so every output coordinate
/// contributes with a distinct weight.
pub fn readout<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let probe = uniform(&y.shape(), -1.0, 1.0, &mut rng(seed ^ 0x9e37));
    Ok(y.mul(tape.constant(probe))?.sum())
}

/// One entry per differentiable op (and per stride or bias variant).
pub fn op_cases() -> Vec<OpCase> {
    let order: Arc<[usize]> = generate_path(GridShape::new(3, 3).unwrap(), PathId::ColSnakeBR).order;
    let rm = Tensor::<f64>::from_f64(&[2], &[0.1, -0.2]).unwrap();
    let rv = Tensor::<f64>::from_f64(&[2], &[0.7, 1.4]).unwrap();
    vec![
        case("add", &[&[2, 3], &[2, 3]], Box::new(|_, v| v[0].add(v[1]))),
        case("sub", &[&[2, 3], &[2, 3]], Box::new(|_, v| v[0].sub(v[1]))),
        case("mul", &[&[2, 3], &[2, 3]], Box::new(|_, v| v[0].mul(v[1]))),
        case("scale", &[&[4]], Box::new(|_, v| Ok(v[0].scale(-1.7)))),
        case("relu", &[&[3, 4]], Box::new(|_, v| Ok(v[0].relu()))),
        case("gelu", &[&[3, 4]], Box::new(|_, v| Ok(v[0].gelu()))),
        case("silu", &[&[3, 4]], Box::new(|_, v| Ok(v[0].silu()))),
        case("softplus", &[&[3, 4]], Box::new(|_, v| Ok(v[0].softplus()))),
        case("sum", &[&[2, 5]], Box::new(|_, v| Ok(v[0].sum()))),
        case("mean", &[&[2, 5]], Box::new(|_, v| Ok(v[0].mean()))),
        case("reshape", &[&[2, 6]], Box::new(|_, v| v[0].reshape(&[3, 4]))),
        case("transpose_12", &[&[2, 3, 4]], Box::new(|_, v| v[0].transpose_12())),
        case("global_avg_pool", &[&[2, 3, 3, 2]], Box::new(|_, v| v[0].global_avg_pool())),
        case(
            "add_batch_broadcast",
            &[&[3, 2, 2, 2], &[2, 2, 2]],
            Box::new(|_, v| v[0].add_batch_broadcast(v[1])),
        ),
        case("resize_bilinear", &[&[2, 3, 2]], Box::new(|_, v| v[0].resize_bilinear(4, 5))),
        case(
            "permute_tokens",
            &[&[2, 2, 9]],
            Box::new(move |_, v| v[0].permute_tokens(order.clone())),
        ),
        case(
            "conv2d",
            &[&[2, 3, 5, 5], &[4, 3, 3, 3], &[4]],
            Box::new(|_, v| v[0].conv2d(v[1], Some(v[2]), 1, 1)),
        ),
        case(
            "conv2d stride 2",
            &[&[1, 2, 6, 6], &[3, 2, 3, 3]],
            Box::new(|_, v| v[0].conv2d(v[1], None, 2, 1)),
        ),
        case(
            "conv2d 1x1",
            &[&[2, 4, 3, 2], &[5, 4, 1, 1]],
            Box::new(|_, v| v[0].conv2d(v[1], None, 1, 0)),
        ),
        case(
            "depthwise_conv2d",
            &[&[2, 3, 5, 4], &[3, 1, 3, 3], &[3]],
            Box::new(|_, v| v[0].depthwise_conv2d(v[1], Some(v[2]), 1, 1)),
        ),
        case(
            "depthwise_conv2d stride 2",
            &[&[1, 2, 6, 6], &[2, 1, 3, 3]],
            Box::new(|_, v| v[0].depthwise_conv2d(v[1], None, 2, 1)),
        ),
        case(
            "linear",
            &[&[3, 4], &[5, 4], &[5]],
            Box::new(|_, v| v[0].linear(v[1], Some(v[2]))),
        ),
        case("linear rank 3", &[&[2, 3, 4], &[2, 4]], Box::new(|_, v| v[0].linear(v[1], None))),
        case(
            "batch_norm_train",
            &[&[3, 2, 2, 2], &[2], &[2]],
            Box::new(|_, v| v[0].batch_norm_train(v[1], v[2]).map(|(y, _)| y)),
        ),
        case(
            "batch_norm_eval",
            &[&[2, 2, 3, 1], &[2], &[2]],
            Box::new(move |_, v| v[0].batch_norm_eval(v[1], v[2], &rm, &rv)),
        ),
        case(
            "layer_norm",
            &[&[2, 3, 5], &[5], &[5]],
            Box::new(|_, v| v[0].layer_norm(v[1], v[2])),
        ),
        case(
            "softmax_cross_entropy",
            &[&[4, 6]],
            // scaled so the loss is not near-saturated
            Box::new(|tape, v| {
                v[0].mul(tape.constant(Tensor::full(&[4, 6], 2.0)))?
                    .softmax_cross_entropy(&[0, 5, 3, 3])
            }),
        ),
    ]
}

pub fn run_op_case(c: &OpCase, seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let inputs: Vec<Tensor<f64>> = c.shapes.iter().map(|s| uniform(s, -1.0, 1.0, &mut r)).collect();
    let scalar_out = c.name == "softmax_cross_entropy" || c.name == "sum" || c.name == "mean";
    finite_diff_check(
        |tape, v| {
            let y = (c.f)(tape, v)?;
            if scalar_out {
                Ok(y)
            } else {
                readout(tape, y, seed)
            }
        },
        &inputs,
        &GradCheckOptions::default(),
    )
    .unwrap()
}

/// The selective scan with respect to all of its inputs.
pub fn scan_case(kernel: ScanKernel, with_theta: bool, seed: u64) -> GradCheckReport {
    let (b, d, n, l) = (1, 3, 4, 8);
    let mut r = rng(100 + seed);
    let mut dirs = vec![0u8];
    dirs.extend((1..l).map(|_| r.random_range(1..5u8)));
    let dirs: Arc<[u8]> = dirs.into();
    let mut inputs = vec![
        uniform(&[b, d, l], -1.0, 1.0, &mut r),
        uniform(&[b, d, l], 0.05, 0.6, &mut r),
        uniform(&[b, n, l], -1.0, 1.0, &mut r),
        uniform(&[b, n, l], -1.0, 1.0, &mut r),
        uniform(&[d, n], -0.5, 1.0, &mut r),
        uniform(&[d], -1.0, 1.0, &mut r),
    ];
    if with_theta {
        inputs.push(uniform(&[5, n], -0.5, 0.5, &mut r));
    }
    finite_diff_check(
        |tape, v| {
            let y = tape.selective_scan(ScanArgs {
                x: v[0],
                delta: v[1],
                b_seq: v[2],
                c_seq: v[3],
                a_log: v[4],
                d_skip: v[5],
                theta: v.get(6).copied(),
                dirs: dirs.clone(),
                kernel,
            })?;
            readout(tape, y, seed)
        },
        &inputs,
        &GradCheckOptions::default(),
    )
    .unwrap()
}

/// A block's gradient with respect to its input and every parameter, with
/// eval-mode (randomized, non-identity) batch norms.
fn block_case<F>(store: &ParamStore<f64>, x: Tensor<f64>, kernel: ScanKernel, max_coords: usize, forward: F) -> GradCheckReport
where
    F: for<'t> Fn(&Ctx<'t, '_, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let names: Vec<String> = store.params().map(|(n, _)| n.to_string()).collect();
    let mut inputs = vec![x];
    inputs.extend(names.iter().map(|n| (**store.get(n).unwrap()).clone()));
    finite_diff_check(
        |tape, v| {
            let mut ctx = Ctx::new(tape, store, Mode::Eval, false);
            ctx.scan_kernel = kernel;
            for (n, &var) in names.iter().zip(&v[1..]) {
                ctx.bind(n, var);
            }
            readout(tape, forward(&ctx, v[0])?, 7)
        },
        &inputs,
        &GradCheckOptions {
            max_coords_per_input: Some(max_coords),
            ..Default::default()
        },
    )
    .unwrap()
}

pub fn mdm_case(channels: usize, h: usize, w: usize, kernel: ScanKernel, seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let block = MdmBlock::new(&mut store, "mdm", channels, GridShape::new(4, 4).unwrap(), &mut r);
    randomize_norms(&mut store, &mut r);
    let x = uniform(&[1, channels, h, w], -1.0, 1.0, &mut r);
    block_case(&store, x, kernel, 6, |ctx, x| block.forward(ctx, x))
}

pub fn ffn_case(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let block = FfnBlock::new(&mut store, "ffn", 4, &mut r);
    randomize_norms(&mut store, &mut r);
    let x = uniform(&[1, 4, 4, 4], -1.0, 1.0, &mut r);
    block_case(&store, x, ScanKernel::Sequential, 8, |ctx, x| block.forward(ctx, x))
}

/// Nano end to end on a 2-sample batch through the cross-entropy loss, two
/// random coordinates per input and parameter tensor.
pub fn nano_case(seed: u64) -> (GradCheckReport, usize) {
    let mut r = rng(seed);
    let mut model = Model::<f64>::build(ModelSpec::nano(), seed).unwrap();
    randomize_norms(model.store_mut(), &mut r);
    let images = uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut r);
    let labels = [3, 8];
    let store = model.store();
    let names: Vec<String> = store.params().map(|(n, _)| n.to_string()).collect();
    let mut inputs = vec![images];
    inputs.extend(names.iter().map(|n| (**store.get(n).unwrap()).clone()));
    let report = finite_diff_check(
        |tape, v| {
            let ctx = Ctx::new(tape, store, Mode::Eval, false);
            for (n, &var) in names.iter().zip(&v[1..]) {
                ctx.bind(n, var);
            }
            let (logits, _) = model.forward_ctx(&ctx, v[0])?;
            logits.softmax_cross_entropy(&labels)
        },
        &inputs,
        &GradCheckOptions {
            max_coords_per_input: Some(2),
            ..Default::default()
        },
    )
    .unwrap();
    (report, names.len())
}
