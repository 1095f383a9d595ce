//! Independent reference implementations shared by the integration tests.
//!
//! Everything here is written with plain loops over `f64` slices and avoids
//! the crate's own kernels, so agreement with the crate is meaningful.

#![allow(dead_code)]

pub mod grad;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcmamba::{ParamStore, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Direction codes: begin, right, left, down, up.
pub const BEGIN: u8 = 0;
pub const RIGHT: u8 = 1;
pub const LEFT: u8 = 2;
pub const DOWN: u8 = 3;
pub const UP: u8 = 4;

/// Serpentine orders built directly from their definition.
pub fn naive_order(h: usize, w: usize, path: usize) -> Vec<usize> {
    let row_tl: Vec<usize> = (0..h)
        .flat_map(|r| {
            let cols: Vec<usize> = if r % 2 == 0 { (0..w).collect() } else { (0..w).rev().collect() };
            cols.into_iter().map(move |c| r * w + c)
        })
        .collect();
    let col_tl: Vec<usize> = (0..w)
        .flat_map(|c| {
            let rows: Vec<usize> = if c % 2 == 0 { (0..h).collect() } else { (0..h).rev().collect() };
            rows.into_iter().map(move |r| r * w + c)
        })
        .collect();
    let rev = |v: &[usize]| v.iter().rev().copied().collect::<Vec<_>>();
    match path {
        0 => row_tl,
        1 => rev(&row_tl),
        2 => col_tl,
        3 => rev(&col_tl),
        _ => panic!("path index"),
    }
}

pub fn naive_dirs(order: &[usize], w: usize) -> Vec<u8> {
    let mut dirs = vec![BEGIN];
    for pair in order.windows(2) {
        let (r0, c0) = ((pair[0] / w) as i64, (pair[0] % w) as i64);
        let (r1, c1) = ((pair[1] / w) as i64, (pair[1] % w) as i64);
        dirs.push(match (r1 - r0, c1 - c0) {
            (0, 1) => RIGHT,
            (0, -1) => LEFT,
            (1, 0) => DOWN,
            (-1, 0) => UP,
            d => panic!("non-adjacent step {d:?}"),
        });
    }
    dirs
}

/// Scan operands for one instance, row-major as `[B, D, L]`, `[B, N, L]`,
/// `[D, N]`, `[D]`, `[5, N]`.
pub struct ScanCase {
    pub b: usize,
    pub d: usize,
    pub n: usize,
    pub l: usize,
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub bs: Vec<f64>,
    pub cs: Vec<f64>,
    pub a_log: Vec<f64>,
    pub d_skip: Vec<f64>,
    pub theta: Vec<f64>,
    pub dirs: Vec<u8>,
}

impl ScanCase {
    pub fn random(b: usize, d: usize, n: usize, l: usize, rng: &mut impl Rng) -> Self {
        let mut v = |k: usize, lo: f64, hi: f64| (0..k).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let x = v(b * d * l, -1.0, 1.0);
        let delta = v(b * d * l, 1e-3, 0.5);
        let bs = v(b * n * l, -1.0, 1.0);
        let cs = v(b * n * l, -1.0, 1.0);
        let a_log = v(d * n, -1.0, 1.5);
        let d_skip = v(d, -1.0, 1.0);
        let theta = v(5 * n, -0.5, 0.5);
        let mut dirs = vec![BEGIN];
        dirs.extend((1..l).map(|_| rng.random_range(1..5u8)));
        Self { b, d, n, l, x, delta, bs, cs, a_log, d_skip, theta, dirs }
    }

    pub fn t(&self, which: &str) -> Tensor<f64> {
        let (shape, data): (Vec<usize>, &Vec<f64>) = match which {
            "x" => (vec![self.b, self.d, self.l], &self.x),
            "delta" => (vec![self.b, self.d, self.l], &self.delta),
            "b" => (vec![self.b, self.n, self.l], &self.bs),
            "c" => (vec![self.b, self.n, self.l], &self.cs),
            "a_log" => (vec![self.d, self.n], &self.a_log),
            "d_skip" => (vec![self.d], &self.d_skip),
            "theta" => (vec![5, self.n], &self.theta),
            _ => panic!("unknown operand {which}"),
        };
        Tensor::new(&shape, data.clone()).unwrap()
    }
}

/// Token-by-token recurrence, with the direction offset when `with_theta`.
pub fn naive_scan(c: &ScanCase, with_theta: bool) -> Vec<f64> {
    let mut y = vec![0.0; c.b * c.d * c.l];
    for bi in 0..c.b {
        for di in 0..c.d {
            let mut h = vec![0.0; c.n];
            for li in 0..c.l {
                let xi = c.x[(bi * c.d + di) * c.l + li];
                let dt = c.delta[(bi * c.d + di) * c.l + li];
                let mut acc = 0.0;
                for ni in 0..c.n {
                    let a = -c.a_log[di * c.n + ni].exp();
                    let mut bv = c.bs[(bi * c.n + ni) * c.l + li];
                    if with_theta {
                        bv += c.theta[c.dirs[li] as usize * c.n + ni];
                    }
                    h[ni] = (dt * a).exp() * h[ni] + dt * bv * xi;
                    acc += c.cs[(bi * c.n + ni) * c.l + li] * h[ni];
                }
                y[(bi * c.d + di) * c.l + li] = acc + c.d_skip[di] * xi;
            }
        }
    }
    y
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- straight-line block oracle -------------------------------------------

/// A `[C, H, W]` feature map for a single sample.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }
}

fn p<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    store.get(name).unwrap_or_else(|_| panic!("missing {name}")).data()
}

fn bn_eval(store: &ParamStore<f64>, prefix: &str, m: &Map) -> Map {
    let g = p(store, &format!("{prefix}.weight"));
    let b = p(store, &format!("{prefix}.bias"));
    let mu = p(store, &format!("{prefix}.running_mean"));
    let var = p(store, &format!("{prefix}.running_var"));
    let hw = m.h * m.w;
    let v = (0..m.v.len())
        .map(|i| {
            let c = i / hw;
            (m.v[i] - mu[c]) / (var[c] + 1e-5).sqrt() * g[c] + b[c]
        })
        .collect();
    Map { v, ..*m }
}

fn pointwise(store: &ParamStore<f64>, weight: &str, bias: Option<&str>, m: &Map) -> Map {
    let w = p(store, weight);
    let cout = w.len() / m.c;
    let hw = m.h * m.w;
    let mut v = vec![0.0; cout * hw];
    for o in 0..cout {
        for i in 0..m.c {
            for s in 0..hw {
                v[o * hw + s] += w[o * m.c + i] * m.v[i * hw + s];
            }
        }
        if let Some(b) = bias {
            let bv = p(store, b)[o];
            v[o * hw..(o + 1) * hw].iter_mut().for_each(|x| *x += bv);
        }
    }
    Map { c: cout, h: m.h, w: m.w, v }
}

fn depthwise3(store: &ParamStore<f64>, weight: &str, bias: Option<&str>, m: &Map) -> Map {
    let w = p(store, weight);
    let mut out = m.clone();
    for c in 0..m.c {
        let b = bias.map_or(0.0, |b| p(store, b)[c]);
        for y in 0..m.h {
            for x in 0..m.w {
                let mut acc = b;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (y as i64 + ky as i64 - 1, x as i64 + kx as i64 - 1);
                        if sy >= 0 && sx >= 0 && (sy as usize) < m.h && (sx as usize) < m.w {
                            acc += w[c * 9 + ky * 3 + kx] * m.at(c, sy as usize, sx as usize);
                        }
                    }
                }
                out.v[(c * m.h + y) * m.w + x] = acc;
            }
        }
    }
    out
}

fn map_fn(m: &Map, f: impl Fn(f64) -> f64) -> Map {
    Map { v: m.v.iter().map(|&x| f(x)).collect(), ..*m }
}

fn add(a: &Map, b: &Map) -> Map {
    Map { v: a.v.iter().zip(&b.v).map(|(x, y)| x + y).collect(), ..*a }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

/// Expand, BN, GeLU, depthwise, BN, GeLU, project, BN.
pub fn conv_mlp(store: &ParamStore<f64>, prefix: &str, m: &Map) -> Map {
    let t = pointwise(store, &format!("{prefix}.expand.weight"), None, m);
    let t = map_fn(&bn_eval(store, &format!("{prefix}.bn1"), &t), gelu);
    let t = depthwise3(store, &format!("{prefix}.dw.weight"), None, &t);
    let t = map_fn(&bn_eval(store, &format!("{prefix}.bn2"), &t), gelu);
    let t = pointwise(store, &format!("{prefix}.project.weight"), None, &t);
    bn_eval(store, &format!("{prefix}.bn3"), &t)
}

/// Eval-mode multi-directional block on one sample whose grid matches the
/// stored positional table.
pub fn mdm_block(store: &ParamStore<f64>, prefix: &str, x: &Map) -> Map {
    let n = |f: &str| format!("{prefix}.{f}");
    let u = pointwise(store, &n("in_proj.weight"), None, &bn_eval(store, &n("norm1"), x));
    let pos = p(store, &n("pos_embed"));
    let u = Map { v: u.v.iter().zip(pos).map(|(a, b)| a + b).collect(), ..u };
    let u = map_fn(&depthwise3(store, &n("dw.weight"), Some(&n("dw.bias")), &u), silu);

    let (d, l) = (u.c, u.h * u.w);
    let down = p(store, &n("ssm.w_dt_down"));
    let up = p(store, &n("ssm.w_dt_up"));
    let b_delta = p(store, &n("ssm.b_delta"));
    let w_b = p(store, &n("ssm.w_b"));
    let w_c = p(store, &n("ssm.w_c"));
    let r = down.len() / d;
    let ns = w_b.len() / d;
    // per-token projections at grid positions
    let mut delta = vec![0.0; d * l];
    let mut bs = vec![0.0; ns * l];
    let mut cs = vec![0.0; ns * l];
    for s in 0..l {
        let tok: Vec<f64> = (0..d).map(|c| u.v[c * l + s]).collect();
        let low: Vec<f64> = (0..r).map(|k| (0..d).map(|c| down[k * d + c] * tok[c]).sum()).collect();
        for c in 0..d {
            let z: f64 = (0..r).map(|k| up[c * r + k] * low[k]).sum::<f64>() + b_delta[c];
            delta[c * l + s] = softplus(z);
        }
        for k in 0..ns {
            bs[k * l + s] = (0..d).map(|c| w_b[k * d + c] * tok[c]).sum();
            cs[k * l + s] = (0..d).map(|c| w_c[k * d + c] * tok[c]).sum();
        }
    }

    let mut total = vec![0.0; d * l];
    for path in 0..4 {
        let order = naive_order(u.h, u.w, path);
        let perm = |src: &[f64], ch: usize| -> Vec<f64> {
            (0..ch).flat_map(|c| order.iter().map(move |&o| src[c * l + o])).collect()
        };
        let case = ScanCase {
            b: 1,
            d,
            n: ns,
            l,
            x: perm(&u.v, d),
            delta: perm(&delta, d),
            bs: perm(&bs, ns),
            cs: perm(&cs, ns),
            a_log: p(store, &n("ssm.a_log")).to_vec(),
            d_skip: p(store, &n("ssm.d_skip")).to_vec(),
            theta: p(store, &n("ssm.theta")).to_vec(),
            dirs: naive_dirs(&order, u.w),
        };
        let y = naive_scan(&case, true);
        for c in 0..d {
            for (j, &o) in order.iter().enumerate() {
                total[c * l + o] += y[c * l + j];
            }
        }
    }

    let g = p(store, &n("norm.weight"));
    let bt = p(store, &n("norm.bias"));
    for s in 0..l {
        let mean = (0..d).map(|c| total[c * l + s]).sum::<f64>() / d as f64;
        let var = (0..d).map(|c| (total[c * l + s] - mean).powi(2)).sum::<f64>() / d as f64;
        for c in 0..d {
            total[c * l + s] = (total[c * l + s] - mean) / (var + 1e-5).sqrt() * g[c] + bt[c];
        }
    }
    let mixed = Map { c: d, h: u.h, w: u.w, v: total };
    let branch = bn_eval(store, &n("out_bn"), &pointwise(store, &n("out_proj.weight"), None, &mixed));
    let x1 = add(x, &branch);
    add(&x1, &conv_mlp(store, &n("mlp"), &bn_eval(store, &n("norm2"), &x1)))
}

/// Overwrites every batch-norm affine and running statistic in `store` with
/// random values so eval-mode normalization is not the identity.
pub fn randomize_norms(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let shape = store.get(&name).unwrap().shape().to_vec();
        let value = if name.ends_with("running_var") {
            Some(uniform(&shape, 0.5, 2.0, rng))
        } else if name.ends_with("running_mean") || name.ends_with(".bias") {
            Some(uniform(&shape, -0.3, 0.3, rng))
        } else if name.ends_with(".weight") && shape.len() == 1 {
            Some(uniform(&shape, 0.5, 1.5, rng))
        } else if name.ends_with("theta") {
            Some(uniform(&shape, -0.5, 0.5, rng))
        } else {
            None
        };
        if let Some(v) = value {
            store.set(&name, v).unwrap();
        }
    }
}
