#![allow(dead_code)]

use cellattr_core::models::{Cnn, CnnConfig, Vit, VitConfig};
use cellattr_core::tensor::{grad_check, Result, Tape, Tensor, Var};
use cellattr_core::trainer::multi_head_loss;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPSILON: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
pub const SHAPES: usize = 5;

type T64 = Tensor<f64>;

/// Worst relative error of one op over its random shapes.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: &'static str,
    pub shapes: usize,
    pub worst: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> T64 {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values at least 0.05 away from zero, so ε-probes never cross a relu kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> T64 {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced 0.05 apart, so pooling maxima are never tied.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> T64 {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Tensor::new(
        shape.to_vec(),
        order.iter().map(|&i| i as f64 * 0.05 - 0.5).collect(),
    )
    .unwrap()
}

/// `Σ wᵢ·outᵢ` with fixed irregular weights, so every output element
/// contributes a distinct O(1) gradient.
fn weigh(tape: &Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.shape(out);
    let w = Tensor::from_fn(shape, |i| {
        ((i as f64 + 1.0) * 0.618_033_988_7).fract() * 2.0 - 1.0
    });
    let w = tape.constant(w);
    Ok(tape.sum(tape.mul(out, w)?))
}

fn check(f: impl Fn(&Tape<f64>, Var) -> Result<Var>, x: &T64) -> f64 {
    grad_check(f, x, EPSILON).expect("grad_check runs")
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Runs `body` on `SHAPES` seeded draws and keeps the worst error.
fn case(name: &'static str, seed: u64, mut body: impl FnMut(&mut ChaCha8Rng) -> f64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worst = (0..SHAPES).map(|_| body(&mut rng)).fold(0.0, f64::max);
    GradCase {
        name,
        shapes: SHAPES,
        worst,
    }
}

pub fn elementwise_cases() -> Vec<GradCase> {
    vec![
        case("add", 1, |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 6)];
            let b = uniform(r, &s);
            check(
                |t, x| weigh(t, t.add(x, t.constant(b.clone()))?),
                &uniform(r, &s),
            )
        }),
        case("add_trailing", 2, |r| {
            let s = [dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3)];
            let x0 = uniform(r, &s);
            let y0 = uniform(r, &s[1..]);
            let wrt_y = check(
                |t, y| weigh(t, t.add_trailing(t.constant(x0.clone()), y)?),
                &y0,
            );
            let wrt_x = check(
                |t, x| weigh(t, t.add_trailing(x, t.constant(y0.clone()))?),
                &x0,
            );
            wrt_x.max(wrt_y)
        }),
        case("add_channel_bias", 3, |r| {
            let s = [dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 2)];
            let x0 = uniform(r, &s);
            let b0 = uniform(r, &[s[1]]);
            let wrt_b = check(
                |t, b| weigh(t, t.add_channel_bias(t.constant(x0.clone()), b)?),
                &b0,
            );
            let wrt_x = check(
                |t, x| weigh(t, t.add_channel_bias(x, t.constant(b0.clone()))?),
                &x0,
            );
            wrt_x.max(wrt_b)
        }),
        case("mul", 4, |r| {
            let s = [dims(r, 1, 5), dims(r, 1, 5)];
            let b = uniform(r, &s);
            check(
                |t, x| weigh(t, t.mul(x, t.constant(b.clone()))?),
                &uniform(r, &s),
            )
        }),
        case("mul_fan_out", 5, |r| {
            let s = [dims(r, 1, 5), dims(r, 1, 5)];
            check(|t, x| weigh(t, t.mul(x, x)?), &uniform(r, &s))
        }),
        case("scale", 6, |r| {
            let s = [dims(r, 1, 6), dims(r, 1, 4)];
            let k = r.random_range(-2.0..2.0);
            check(|t, x| weigh(t, t.scale(x, k)), &uniform(r, &s))
        }),
        case("relu", 7, |r| {
            let s = [dims(r, 1, 6), dims(r, 1, 5)];
            check(|t, x| weigh(t, t.relu(x)), &away_from_zero(r, &s))
        }),
        case("gelu", 8, |r| {
            let s = [dims(r, 1, 6), dims(r, 1, 5)];
            let x = Tensor::from_fn(s.to_vec(), |_| r.random_range(-3.0..3.0));
            check(|t, x| weigh(t, t.gelu(x)), &x)
        }),
    ]
}

pub fn shape_cases() -> Vec<GradCase> {
    vec![
        case("reshape", 11, |r| {
            let (a, b, c) = (dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3));
            check(
                |t, x| weigh(t, t.reshape(x, &[a * b, c])?),
                &uniform(r, &[a, b, c]),
            )
        }),
        case("permute", 12, |r| {
            let s = [dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3)];
            let mut perm = [0, 1, 2];
            perm.shuffle(r);
            check(|t, x| weigh(t, t.permute(x, &perm)?), &uniform(r, &s))
        }),
        case("transpose", 13, |r| {
            let s = [dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 3)];
            let (d0, d1) = (r.random_range(0..3), r.random_range(0..3));
            check(|t, x| weigh(t, t.transpose(x, d0, d1)?), &uniform(r, &s))
        }),
        case("concat", 14, |r| {
            let axis = r.random_range(0..2);
            let s = [dims(r, 1, 4), dims(r, 1, 4)];
            let mut other = s;
            other[axis] = dims(r, 1, 3);
            let b = uniform(r, &other);
            let first = check(
                |t, x| weigh(t, t.concat(&[x, t.constant(b.clone())], axis)?),
                &uniform(r, &s),
            );
            let fan = check(|t, x| weigh(t, t.concat(&[x, x], axis)?), &uniform(r, &s));
            first.max(fan)
        }),
        case("narrow", 15, |r| {
            let s = [dims(r, 2, 5), dims(r, 2, 5)];
            let axis = r.random_range(0..2);
            let start = r.random_range(0..s[axis] - 1);
            let len = r.random_range(1..=s[axis] - start);
            check(
                |t, x| weigh(t, t.narrow(x, axis, start, len)?),
                &uniform(r, &s),
            )
        }),
        case("expand0", 16, |r| {
            let s = [1, dims(r, 1, 4), dims(r, 1, 4)];
            let n = dims(r, 1, 3);
            check(|t, x| weigh(t, t.expand0(x, n)?), &uniform(r, &s))
        }),
        case("sum", 17, |r| {
            let s = [dims(r, 1, 5), dims(r, 1, 5)];
            check(|t, x| Ok(t.sum(x)), &uniform(r, &s))
        }),
        case("mean", 18, |r| {
            let s = [dims(r, 1, 5), dims(r, 1, 5)];
            check(|t, x| Ok(t.mean(x)), &uniform(r, &s))
        }),
        case("pick", 19, |r| {
            let s = [dims(r, 1, 5), dims(r, 1, 5)];
            let i = r.random_range(0..s[0] * s[1]);
            check(|t, x| t.pick(x, i), &uniform(r, &s))
        }),
    ]
}

pub fn linear_algebra_cases() -> Vec<GradCase> {
    vec![
        case("matmul", 21, |r| {
            let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 5), dims(r, 1, 4));
            let (a, b) = (uniform(r, &[m, k]), uniform(r, &[k, n]));
            let wa = check(|t, x| weigh(t, t.matmul(x, t.constant(b.clone()))?), &a);
            let wb = check(|t, x| weigh(t, t.matmul(t.constant(a.clone()), x)?), &b);
            wa.max(wb)
        }),
        case("bmm", 22, |r| {
            let (h, m, k, n) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 3));
            let (a, b) = (uniform(r, &[h, m, k]), uniform(r, &[h, k, n]));
            let wa = check(|t, x| weigh(t, t.bmm(x, t.constant(b.clone()))?), &a);
            let wb = check(|t, x| weigh(t, t.bmm(t.constant(a.clone()), x)?), &b);
            wa.max(wb)
        }),
        case("linear", 23, |r| {
            let (n, i, o) = (dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4));
            let (x0, w0, b0) = (uniform(r, &[n, i]), uniform(r, &[i, o]), uniform(r, &[o]));
            let c = |t: &Tape<f64>, v: &T64| t.constant(v.clone());
            let wx = check(|t, x| weigh(t, t.linear(x, c(t, &w0), c(t, &b0))?), &x0);
            let ww = check(|t, w| weigh(t, t.linear(c(t, &x0), w, c(t, &b0))?), &w0);
            let wb = check(|t, b| weigh(t, t.linear(c(t, &x0), c(t, &w0), b)?), &b0);
            wx.max(ww).max(wb)
        }),
        case("softmax", 24, |r| {
            let s = [dims(r, 1, 4), dims(r, 2, 5)];
            let axis = r.random_range(0..2);
            check(|t, x| weigh(t, t.softmax(x, axis)?), &uniform(r, &s))
        }),
        case("layer_norm", 25, |r| {
            let s = [dims(r, 1, 3), dims(r, 2, 6)];
            let (x0, g0, b0) = (uniform(r, &s), uniform(r, &[s[1]]), uniform(r, &[s[1]]));
            let c = |t: &Tape<f64>, v: &T64| t.constant(v.clone());
            let wx = check(
                |t, x| weigh(t, t.layer_norm(x, 1, c(t, &g0), c(t, &b0), 1e-5)?),
                &x0,
            );
            let wg = check(
                |t, g| weigh(t, t.layer_norm(c(t, &x0), 1, g, c(t, &b0), 1e-5)?),
                &g0,
            );
            let wb = check(
                |t, b| weigh(t, t.layer_norm(c(t, &x0), 1, c(t, &g0), b, 1e-5)?),
                &b0,
            );
            wx.max(wg).max(wb)
        }),
        case("cross_entropy", 26, |r| {
            let (n, k) = (dims(r, 1, 4), dims(r, 2, 5));
            let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            check(|t, x| t.cross_entropy(x, &targets), &uniform(r, &[n, k]))
        }),
        case("attention", 27, |r| {
            let (h, l, d) = (dims(r, 1, 2), dims(r, 2, 3), dims(r, 1, 4));
            let (q0, k0, v0) = (
                uniform(r, &[h, l, d]),
                uniform(r, &[h, l, d]),
                uniform(r, &[h, l, d]),
            );
            let c = |t: &Tape<f64>, v: &T64| t.constant(v.clone());
            let out = |t: &Tape<f64>, q, k, v| -> Result<Var> {
                let (o, w) = t.scaled_dot_product_attention(q, k, v)?;
                let (a, b) = (weigh(t, o)?, weigh(t, w)?);
                t.add(a, b)
            };
            let wq = check(|t, q| out(t, q, c(t, &k0), c(t, &v0)), &q0);
            let wk = check(|t, k| out(t, c(t, &q0), k, c(t, &v0)), &k0);
            let wv = check(|t, v| out(t, c(t, &q0), c(t, &k0), v), &v0);
            wq.max(wk).max(wv)
        }),
    ]
}

pub fn spatial_cases() -> Vec<GradCase> {
    vec![
        case("conv2d", 31, |r| {
            let (n, c, o) = (dims(r, 1, 2), dims(r, 1, 2), dims(r, 1, 2));
            let k = dims(r, 1, 3);
            let side = dims(r, k.max(2), 4);
            let (stride, pad) = (dims(r, 1, 2), dims(r, 0, 1));
            let (x0, w0) = (uniform(r, &[n, c, side, side]), uniform(r, &[o, c, k, k]));
            let wx = check(
                |t, x| weigh(t, t.conv2d(x, t.constant(w0.clone()), stride, pad)?),
                &x0,
            );
            let ww = check(
                |t, w| weigh(t, t.conv2d(t.constant(x0.clone()), w, stride, pad)?),
                &w0,
            );
            wx.max(ww)
        }),
        case("max_pool2d", 32, |r| {
            let (n, c) = (dims(r, 1, 2), dims(r, 1, 2));
            let side = 2 * dims(r, 1, 2);
            let stride = dims(r, 1, 2);
            check(
                |t, x| weigh(t, t.max_pool2d(x, 2, stride)?),
                &distinct(r, &[n, c, side, side]),
            )
        }),
        case("avg_pool2d", 33, |r| {
            let (n, c) = (dims(r, 1, 2), dims(r, 1, 2));
            let side = 2 * dims(r, 1, 2);
            let stride = dims(r, 1, 2);
            check(
                |t, x| weigh(t, t.avg_pool2d(x, 2, stride)?),
                &uniform(r, &[n, c, side, side]),
            )
        }),
        case("global_avg_pool", 34, |r| {
            let s = [dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3)];
            check(|t, x| weigh(t, t.global_avg_pool(x)?), &uniform(r, &s))
        }),
    ]
}

/// Every parameter tensor of a model and its input, differentiated through
/// the multi-head cross-entropy loss.
fn composed(
    names: Vec<String>,
    params: &cellattr_core::models::Params<f64>,
    input: &T64,
    forward: &dyn Fn(&Tape<f64>, &cellattr_core::models::Bound, Var) -> Result<Vec<Var>>,
    targets: &[Vec<usize>],
) -> f64 {
    let loss = |t: &Tape<f64>, logits: Vec<Var>| -> Result<Var> {
        let weights = vec![1.0; logits.len()];
        multi_head_loss(t, &logits, targets, &weights).map_err(|e| match e {
            cellattr_core::trainer::TrainError::Tensor(e) => e,
            other => panic!("{other}"),
        })
    };
    let mut worst = check(
        |t, x| {
            let bound = params.bind(t, false);
            loss(t, forward(t, &bound, x)?)
        },
        input,
    );
    for name in names {
        let value = params.get(&name).unwrap().clone();
        let err = check(
            |t, p| {
                let bound = params.bind(t, false).with(&name, p);
                loss(t, forward(t, &bound, t.constant(input.clone()))?)
            },
            &value,
        );
        worst = worst.max(err);
    }
    worst
}

pub fn model_cases() -> Vec<GradCase> {
    vec![
        case("cnn_loss", 41, |r| {
            let side = 4 * dims(r, 1, 2);
            let classes = dims(r, 2, 4);
            let config = CnnConfig {
                input_size: side,
                conv_blocks: vec![(dims(r, 1, 3), 1), (2, 1)],
                fc_dims: vec![dims(r, 2, 4)],
                num_classes: classes,
            };
            let mut cnn: Cnn<f64> = Cnn::new(config, r.random()).unwrap();
            randomize(&mut cnn.params, r);
            let n = dims(r, 1, 2);
            let input = uniform(r, &[n, 3, side, side]);
            let targets = vec![(0..n).map(|_| r.random_range(0..classes)).collect()];
            let names = cnn.params.iter().map(|(n, _)| n.to_string()).collect();
            composed(
                names,
                &cnn.params,
                &input,
                &|t, b, x| Ok(vec![cnn.forward(t, b, x).map_err(model_err)?.logits]),
                &targets,
            )
        }),
        case("vit_loss", 42, |r| {
            let patch = dims(r, 2, 3);
            let heads = vec![("a".to_string(), dims(r, 2, 3)), ("b".to_string(), 2)];
            let config = VitConfig {
                input_size: patch * 2,
                patch_size: patch,
                embed_dim: 4,
                depth: dims(r, 1, 2),
                num_heads: 2,
                mlp_ratio: 1.5,
                head_specs: heads.clone(),
            };
            let mut vit: Vit<f64> = Vit::new(config, r.random()).unwrap();
            randomize(&mut vit.params, r);
            let n = dims(r, 1, 2);
            let input = uniform(r, &[n, 3, patch * 2, patch * 2]);
            let targets: Vec<Vec<usize>> = heads
                .iter()
                .map(|(_, k)| (0..n).map(|_| r.random_range(0..*k)).collect())
                .collect();
            let names = vit.params.iter().map(|(n, _)| n.to_string()).collect();
            composed(
                names,
                &vit.params,
                &input,
                &|t, b, x| Ok(vit.forward(t, b, x).map_err(model_err)?.logits),
                &targets,
            )
        }),
    ]
}

/// Moves the parameters to a random O(1) point. Near-zero init values (the
/// class token) put layer norm's σ close to ε, where central differences
/// stop resolving the curvature.
fn randomize(params: &mut cellattr_core::models::Params<f64>, rng: &mut ChaCha8Rng) {
    for (_, p) in params.iter_mut() {
        *p = uniform(rng, p.shape());
    }
}

fn model_err(e: cellattr_core::models::ModelError) -> cellattr_core::tensor::TensorError {
    match e {
        cellattr_core::models::ModelError::Tensor(e) => e,
        other => panic!("{other}"),
    }
}

pub fn gradient_suite() -> Vec<GradCase> {
    let mut all = elementwise_cases();
    all.extend(shape_cases());
    all.extend(linear_algebra_cases());
    all.extend(spatial_cases());
    all.extend(model_cases());
    all
}
