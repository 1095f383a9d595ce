//! Invariant suite behind `vcmamba check`.
//!
//! Each suite returns one [`CheckResult`]; [`format_matrix`] renders them as
//! CSV (`suite,result,detail`) so the output is machine-parseable.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{finite_diff_check, GradCheckOptions};
use crate::autodiff::Tape;
use crate::blocks::{FfnBlock, MdmBlock};
use crate::error::Result;
use crate::model::{decode_checkpoint, encode_checkpoint, Model, ModelSpec};
use crate::params::{Ctx, Mode, ParamStore};
use crate::scan::{all_paths, gather, scatter, DirectionId, GridShape};
use crate::ssm::{
    direction_aware_scan, selective_scan_parallel, selective_scan_sequential, ScanInputs, SsmParams,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub const MATRIX_HEADER: &str = "suite,result,detail";

pub fn format_matrix(results: &[CheckResult]) -> String {
    let mut s = format!("{MATRIX_HEADER}\n");
    for r in results {
        let result = if r.passed { "pass" } else { "fail" };
        s += &format!("{},{result},{}\n", r.suite, r.detail.replace(',', ";"));
    }
    s
}

type Suite = (&'static str, fn() -> Result<(bool, String)>);

const SUITES: [Suite; 8] = [
    ("scan-paths", scan_paths),
    ("scan-equivalence", scan_equivalence),
    ("direction-aware", direction_aware),
    ("residual-passthrough", residual_passthrough),
    ("gradients", gradients),
    ("checkpoint", checkpoint),
    ("param-bands", param_bands),
    ("shape-ladder", shape_ladder),
];

pub fn suite_names() -> Vec<&'static str> {
    SUITES.iter().map(|s| s.0).collect()
}

/// Runs every suite; an error inside a suite counts as a failure.
pub fn run_checks() -> Vec<CheckResult> {
    SUITES
        .iter()
        .map(|&(suite, f)| {
            let t = Instant::now();
            let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckResult {
                suite,
                passed,
                detail: format!("{detail} ({:.1}s)", t.elapsed().as_secs_f64()),
            }
        })
        .collect()
}

fn scan_paths() -> Result<(bool, String)> {
    let mut grids = 0;
    for h in 1..=16 {
        for w in 1..=16 {
            let grid = GridShape::new(h, w)?;
            let feat = Tensor::<f32>::from_fn(&[1, 2, h, w], |i| i as f32);
            for p in all_paths(grid) {
                let mut seen = vec![false; h * w];
                for &o in p.order.iter() {
                    if o >= h * w || seen[o] {
                        return Ok((false, format!("{} on {h}x{w} is not a permutation", p.path_id)));
                    }
                    seen[o] = true;
                }
                if p.dirs[0] != DirectionId::Begin {
                    return Ok((false, format!("{} on {h}x{w}: first label not begin", p.path_id)));
                }
                for j in 1..p.len() {
                    let (a, b) = (grid.position(p.order[j - 1]), grid.position(p.order[j]));
                    if DirectionId::of_step(a, b) != Some(p.dirs[j]) {
                        return Ok((false, format!("{} on {h}x{w}: bad step {j}", p.path_id)));
                    }
                }
                if scatter(&gather(&feat, &p)?, &p)? != feat {
                    return Ok((false, format!("{} on {h}x{w}: round trip differs", p.path_id)));
                }
            }
            grids += 1;
        }
    }
    Ok((true, format!("{grids} grids x 4 paths")))
}

fn random_case<T: Scalar>(rng: &mut ChaCha8Rng, l: usize) -> (ScanInputs<T>, SsmParams<T>) {
    let (b, d, n) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..9));
    let mut p = SsmParams::<T>::init(d, n, 1, rng);
    p.a_log = Tensor::from_fn(&[d, n], |_| T::lit(rng.random_range(-2.0..2.0)));
    p.d_skip = Tensor::from_fn(&[d], |_| T::lit(rng.random_range(-1.0..1.0)));
    p.theta = Tensor::from_fn(&[DirectionId::COUNT, n], |_| T::lit(rng.random_range(-0.5..0.5)));
    let mut u = |shape: &[usize], lo: f64, hi: f64| Tensor::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)));
    let inputs = ScanInputs {
        x: u(&[b, d, l], -1.0, 1.0),
        delta: u(&[b, d, l], 0.001, 0.5),
        b_seq: u(&[b, n, l], -1.0, 1.0),
        c_seq: u(&[b, n, l], -1.0, 1.0),
        dirs: std::iter::once(0)
            .chain((1..l).map(|_| rng.random_range(1..5u8)))
            .collect(),
    };
    (inputs, p)
}

fn scan_equivalence() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst32, mut worst64) = (0f64, 0f64);
    for _ in 0..100 {
        let l = rng.random_range(1..=512);
        let (i64_, p64) = random_case::<f64>(&mut rng, l);
        let e64 = selective_scan_parallel(&i64_, &p64)?.max_abs_diff(&selective_scan_sequential(&i64_, &p64)?)?;
        let (i32_, p32): (ScanInputs<f32>, SsmParams<f32>) = (i64_.cast(), p64.cast());
        let e32 = selective_scan_parallel(&i32_, &p32)?.max_abs_diff(&selective_scan_sequential(&i32_, &p32)?)?;
        worst32 = worst32.max(e32 as f64);
        worst64 = worst64.max(e64);
    }
    Ok((
        worst32 < 1e-5 && worst64 < 1e-10,
        format!("100 cases; max err f32 {worst32:.2e} f64 {worst64:.2e}"),
    ))
}

/// Token-by-token recurrence written from the definition, used as oracle.
fn naive_direction_scan(inp: &ScanInputs<f64>, p: &SsmParams<f64>) -> Vec<f64> {
    let [b, d, l] = [inp.x.shape()[0], inp.x.shape()[1], inp.x.shape()[2]];
    let n = p.a_log.shape()[1];
    let mut y = vec![0.0; b * d * l];
    for bi in 0..b {
        for di in 0..d {
            let mut h = vec![0.0; n];
            for t in 0..l {
                let dt = inp.delta.data()[(bi * d + di) * l + t];
                let xt = inp.x.data()[(bi * d + di) * l + t];
                let mut acc = p.d_skip.data()[di] * xt;
                for k in 0..n {
                    let a = -p.a_log.data()[di * n + k].exp();
                    let bk = inp.b_seq.data()[(bi * n + k) * l + t] + p.theta.data()[inp.dirs[t] as usize * n + k];
                    h[k] = (dt * a).exp() * h[k] + dt * bk * xt;
                    acc += inp.c_seq.data()[(bi * n + k) * l + t] * h[k];
                }
                y[(bi * d + di) * l + t] = acc;
            }
        }
    }
    y
}

fn direction_aware() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0f64;
    for _ in 0..50 {
        let l = rng.random_range(1..=128);
        let (inp, mut p) = random_case::<f64>(&mut rng, l);
        let got = direction_aware_scan(&inp, &p)?;
        let want = naive_direction_scan(&inp, &p);
        worst = got.data().iter().zip(&want).fold(worst, |m, (a, b)| m.max((a - b).abs()));
        p.theta = Tensor::zeros(p.theta.shape());
        if direction_aware_scan(&inp, &p)? != selective_scan_sequential(&inp, &p)? {
            return Ok((false, "zero theta is not bitwise the plain scan".into()));
        }
    }
    Ok((worst < 1e-6, format!("50 cases; max err {worst:.2e}; zero-theta bitwise")))
}

fn zero_param(store: &mut ParamStore<f64>, name: &str) -> Result<()> {
    let shape = store.get(name)?.shape().to_vec();
    store.set(name, Tensor::zeros(&shape))
}

fn residual_passthrough() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f64>::new();
    let ffn = FfnBlock::new(&mut store, "ffn", 8, &mut rng);
    let mdm = MdmBlock::new(&mut store, "mdm", 8, GridShape::new(4, 4)?, &mut rng);
    zero_param(&mut store, "ffn.mlp.project.weight")?;
    zero_param(&mut store, "mdm.out_proj.weight")?;
    zero_param(&mut store, "mdm.mlp.project.weight")?;
    let x = Tensor::<f64>::from_fn(&[2, 8, 4, 4], |_| rng.random_range(-1.0..1.0));
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval, false);
    let xv = tape.constant(x.clone());
    let f = ffn.forward(&ctx, xv)?.value();
    let m = mdm.forward(&ctx, xv)?.value();
    Ok((
        *f == x && *m == x,
        format!("ffn identity {}; mdm identity {}", *f == x, *m == x),
    ))
}

fn gradients() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::<f64>::new();
    let mdm = MdmBlock::new(&mut store, "mdm", 4, GridShape::new(4, 4)?, &mut rng);
    let names: Vec<String> = store.params().map(|(n, _)| n.to_string()).collect();
    let mut inputs = vec![Tensor::from_fn(&[1, 4, 4, 4], |_| rng.random_range(-1.0..1.0))];
    inputs.extend(names.iter().map(|n| (**store.get(n).expect("listed")).clone()));
    // a non-trivial readout so the loss is not invariant to the output
    let probe = Tensor::<f64>::from_fn(&[1, 4, 4, 4], |_| rng.random_range(-1.0..1.0));
    let report = finite_diff_check(
        |tape, vars| {
            let ctx = Ctx::new(tape, &store, Mode::Eval, false);
            for (n, &v) in names.iter().zip(&vars[1..]) {
                ctx.bind(n, v);
            }
            let y = mdm.forward(&ctx, vars[0])?;
            y.mul(tape.constant(probe.clone())).map(|v| v.sum())
        },
        &inputs,
        &GradCheckOptions {
            max_coords_per_input: Some(6),
            ..Default::default()
        },
    )?;
    Ok((
        report.passed,
        format!(
            "mdm block: {} coords; max rel err {:.2e}",
            report.coords_checked, report.max_rel_error
        ),
    ))
}

fn checkpoint() -> Result<(bool, String)> {
    let model = Model::<f32>::build(ModelSpec::nano(), 5)?;
    let x = Tensor::<f32>::from_fn(&[2, 3, 32, 32], |i| (i % 17) as f32 / 17.0);
    let bytes = encode_checkpoint(&model);
    let loaded: Model<f32> = decode_checkpoint(&bytes)?;
    let same = model.predict(&x)? == loaded.predict(&x)?;
    let truncated = decode_checkpoint::<f32>(&bytes[..bytes.len() - 9]).is_err();
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x40;
    let corrupted = decode_checkpoint::<f32>(&flipped).is_err();
    let mut magic = bytes;
    magic[0] = b'X';
    let bad_magic = decode_checkpoint::<f32>(&magic).is_err();
    Ok((
        same && truncated && corrupted && bad_magic,
        format!("bitwise {same}; rejects truncated {truncated} corrupted {corrupted} bad-magic {bad_magic}"),
    ))
}

fn param_bands() -> Result<(bool, String)> {
    let mut ok = true;
    let mut parts = Vec::new();
    for (preset, target) in [("S", 10.5e6), ("M", 21.0e6), ("B", 31.5e6)] {
        let m = Model::<f32>::build(ModelSpec::preset(preset)?, 0)?;
        let total = m.count_params().total as f64;
        ok &= (total - target).abs() <= 0.10 * target;
        parts.push(format!("{preset} {:.2}M", total / 1e6));
        if let Some(g) = match preset {
            "S" => Some(1.1e9),
            "B" => Some(4.0e9),
            _ => None,
        } {
            let macs = m.count_macs(224)?.total as f64;
            ok &= (macs - g).abs() <= 0.15 * g;
            parts.push(format!("{preset} {:.2}G", macs / 1e9));
        }
    }
    Ok((ok, parts.join(" ")))
}

fn shape_ladder() -> Result<(bool, String)> {
    let model = Model::<f32>::build(ModelSpec::nano(), 0)?;
    let mut ok = true;
    for r in [32, 64] {
        let tape = Tape::new();
        let x = Tensor::<f32>::from_fn(&[1, 3, r, r], |i| (i % 7) as f32 / 7.0);
        let out = model.forward(&tape, &x, Mode::Eval, false)?;
        for (i, f) in out.stage_features.iter().enumerate() {
            let side = r / (4 << i);
            ok &= f.shape() == [1, model.spec().channels[i], side, side];
        }
        ok &= out.logits.shape() == [1, 10];
        ok &= out.logits.value().all_finite();
    }
    ok &= model
        .forward(&Tape::new(), &Tensor::zeros(&[1, 3, 48, 48]), Mode::Eval, false)
        .is_err();
    Ok((ok, "nano at 32 and 64; 48 rejected".into()))
}
