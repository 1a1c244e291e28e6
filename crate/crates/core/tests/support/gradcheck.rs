//! Central finite differences against reverse-mode gradients, in f64.
//! Shared by the `gradcheck` and `acceptance` targets.
//!
//! Each case reduces the op output to a scalar through a fixed random
//! weighting, perturbs every input entry by ±H, and compares. Error is
//! `|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rtd_core::rng::stream_rng;
use rtd_core::tensor::{Graph, Tensor, Var};
use rtd_core::Result;

// 1e-3 leaves O(h²) truncation error above TOL for layer norm on short rows
pub const H: f64 = 1e-5;
const FLOOR: f64 = 1e-3;
pub const TOL: f64 = 1e-4;
pub const SHAPES: u64 = 12;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn matrix(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let shape = [dim(rng), dim(rng)];
    random(rng, &shape)
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

type Build = dyn Fn(&mut Graph<'static, f64>, &[Var]) -> Result<Var>;

fn loss_of(inputs: &[Tensor<f64>], weights: &Tensor<f64>, build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod, None).unwrap();
    g.value(loss).item()
}

/// Worst error over all inputs of one case, with where it happened.
fn check(op: &str, case: u64, inputs: Vec<Tensor<f64>>, build: &Build) -> (f64, String) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap_or_else(|e| panic!("{op} case {case}: {e}"));
    let weights = random(&mut stream_rng(case, op, 1), g.shape(out));
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod, None).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| grads.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(grads);
    let mut worst = (0.0f64, String::new());
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (loss_of(&plus, &weights, build) - loss_of(&minus, &weights, build)) / (2.0 * H);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if err > worst.0 || worst.1.is_empty() {
                worst = (
                    err,
                    format!("case {case} input {i} entry {j}: analytic {a} numeric {numeric} (shape {:?})", t.shape()),
                );
            }
        }
    }
    worst
}

pub struct OpReport {
    pub op: &'static str,
    pub shapes: u64,
    pub worst: f64,
    pub at: String,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst < TOL
    }
}

/// Runs `SHAPES` random cases of one op.
fn sweep(
    out: &mut Vec<OpReport>,
    op: &'static str,
    mut case: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>),
) {
    let mut worst = (0.0f64, String::new());
    for c in 0..SHAPES {
        let mut rng = stream_rng(c, op, 0);
        let (inputs, build) = case(&mut rng);
        let w = check(op, c, inputs, &*build);
        if w.0 >= worst.0 {
            worst = w;
        }
    }
    out.push(OpReport {
        op,
        shapes: SHAPES,
        worst: worst.0,
        at: worst.1,
    });
}

pub fn matmul_shared_right_operand(out: &mut Vec<OpReport>) {
    sweep(out, "matmul", |r| {
        let (b, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
        (vec![random(r, &[b, m, k]), random(r, &[k, n])], Box::new(|g, v| g.matmul(v[0], v[1])))
    });
}

pub fn matmul_batched(out: &mut Vec<OpReport>) {
    sweep(out, "matmul_batched", |r| {
        let (b, h, m, k, n) = (dim(r), dim(r), dim(r), dim(r), dim(r));
        (
            vec![random(r, &[b, h, m, k]), random(r, &[b, h, k, n])],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        )
    });
}

pub fn matmul_transposed(out: &mut Vec<OpReport>) {
    sweep(out, "matmul_t", |r| {
        let (b, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
        let batched = r.gen_bool(0.5);
        let rhs = if batched { random(r, &[b, n, k]) } else { random(r, &[n, k]) };
        (vec![random(r, &[b, m, k]), rhs], Box::new(|g, v| g.matmul_t(v[0], v[1])))
    });
}

pub fn add_and_mul_broadcast(out: &mut Vec<OpReport>) {
    for (name, mul) in [("add", false), ("mul", true)] {
        sweep(out, name, |r| {
            let (a, b, c) = (dim(r), dim(r), dim(r));
            let rhs = match r.gen_range(0..3) {
                0 => vec![a, b, c],
                1 => vec![c],
                _ => vec![b, 1],
            };
            let build: Box<Build> = if mul {
                Box::new(|g, v| g.mul(v[0], v[1]))
            } else {
                Box::new(|g, v| g.add(v[0], v[1]))
            };
            (vec![random(r, &[a, b, c]), random(r, &rhs)], build)
        });
    }
}

pub fn scale(out: &mut Vec<OpReport>) {
    sweep(out, "scale", |r| {
        let f = r.gen_range(-3.0..3.0);
        (vec![matrix(r)], Box::new(move |g, v| Ok(g.scale(v[0], f))))
    });
}

pub fn softmax_and_log_softmax(out: &mut Vec<OpReport>) {
    for (name, log) in [("softmax", false), ("log_softmax", true)] {
        sweep(out, name, |r| {
            let shape = [dim(r), dim(r) + 1, dim(r)];
            let axis = r.gen_range(0..3);
            let build: Box<Build> = if log {
                Box::new(move |g, v| g.log_softmax(v[0], axis))
            } else {
                Box::new(move |g, v| g.softmax(v[0], axis))
            };
            (vec![random(r, &shape)], build)
        });
    }
}

pub fn layer_norm(out: &mut Vec<OpReport>) {
    sweep(out, "layer_norm", |r| {
        let shape = [dim(r), dim(r), dim(r) + 1];
        (vec![random(r, &shape)], Box::new(|g, v| g.layer_norm(v[0], 1e-5)))
    });
}

pub fn gelu_and_sigmoid(out: &mut Vec<OpReport>) {
    sweep(out, "gelu", |r| (vec![matrix(r)], Box::new(|g, v| Ok(g.gelu(v[0])))));
    sweep(out, "sigmoid", |r| (vec![matrix(r)], Box::new(|g, v| Ok(g.sigmoid(v[0])))));
}

pub fn embedding_with_repeated_ids(out: &mut Vec<OpReport>) {
    sweep(out, "embedding", |r| {
        let (rows, width) = (dim(r) + 1, dim(r));
        let lead = [dim(r), dim(r)];
        let ids: Vec<usize> = (0..lead[0] * lead[1]).map(|_| r.gen_range(0..rows)).collect();
        (
            vec![random(r, &[rows, width])],
            Box::new(move |g, v| g.embedding(v[0], &ids, &lead)),
        )
    });
}

pub fn transpose_reshape_slice(out: &mut Vec<OpReport>) {
    sweep(out, "transpose", |r| {
        let shape = [dim(r), dim(r), dim(r)];
        let (d0, d1) = (r.gen_range(0..3), r.gen_range(0..3));
        (vec![random(r, &shape)], Box::new(move |g, v| g.transpose(v[0], d0, d1)))
    });
    sweep(out, "reshape", |r| {
        let (a, b, c) = (dim(r), dim(r), dim(r));
        (vec![random(r, &[a, b, c])], Box::new(move |g, v| g.reshape(v[0], &[c, a * b])))
    });
    sweep(out, "slice", |r| {
        let shape = [dim(r) + 1, dim(r) + 1, dim(r)];
        let axis = r.gen_range(0..2);
        let start = r.gen_range(0..shape[axis]);
        let end = r.gen_range(start + 1..=shape[axis]);
        (vec![random(r, &shape)], Box::new(move |g, v| g.slice(v[0], axis, start, end)))
    });
}

pub fn concat(out: &mut Vec<OpReport>) {
    sweep(out, "concat", |r| {
        let (a, b) = (dim(r), dim(r));
        let axis = r.gen_range(0..2);
        let parts: Vec<Tensor<f64>> = (0..r.gen_range(1..4))
            .map(|_| {
                let mut s = [a, b];
                s[axis] = dim(r);
                random(r, &s)
            })
            .collect();
        (parts, Box::new(move |g, v| g.concat(v, axis)))
    });
}

pub fn sum_and_mean(out: &mut Vec<OpReport>) {
    for (name, mean) in [("sum", false), ("mean", true)] {
        sweep(out, name, |r| {
            let shape = [dim(r), dim(r), dim(r)];
            let axis = match r.gen_range(0..4) {
                3 => None,
                a => Some(a),
            };
            let build: Box<Build> = if mean {
                Box::new(move |g, v| g.mean(v[0], axis))
            } else {
                Box::new(move |g, v| g.sum(v[0], axis))
            };
            (vec![random(r, &shape)], build)
        });
    }
}

pub fn cross_entropy_with_ignored_rows(out: &mut Vec<OpReport>) {
    sweep(out, "cross_entropy", |r| {
        let (n, k) = (dim(r) + 1, dim(r) + 1);
        let mut targets: Vec<Option<usize>> = (0..n)
            .map(|_| r.gen_bool(0.7).then(|| r.gen_range(0..k)))
            .collect();
        targets[0] = Some(r.gen_range(0..k));
        (vec![random(r, &[n, k])], Box::new(move |g, v| g.cross_entropy(v[0], &targets)))
    });
}

pub fn bce_with_logits_weighted(out: &mut Vec<OpReport>) {
    sweep(out, "bce_with_logits", |r| {
        let shape = [dim(r), dim(r)];
        let n = shape[0] * shape[1];
        let targets: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let mut weights: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.7) { 1.0 } else { 0.0 }).collect();
        weights[0] = 1.0;
        (
            vec![random(r, &shape)],
            Box::new(move |g, v| g.bce_with_logits(v[0], &targets, &weights)),
        )
    });
}

pub fn attention_block_composite(out: &mut Vec<OpReport>) {
    // softmax(q·kᵀ/√d + mask)·v with a padded key, as in the encoder
    sweep(out, "attention", |r| {
        let (b, l, d) = (dim(r), dim(r) + 1, dim(r));
        let mut mask = vec![0.0; b * l];
        mask[l - 1] = -1e9;
        let mask = Tensor::new(vec![b, 1, l], mask).unwrap();
        (
            vec![random(r, &[b, l, d]), random(r, &[b, l, d]), random(r, &[b, l, d])],
            Box::new(move |g, v| {
                let s = g.matmul_t(v[0], v[1])?;
                let s = g.scale(s, 1.0 / (d as f64).sqrt());
                let m = g.constant(mask.clone());
                let s = g.add(s, m)?;
                let p = g.softmax(s, 2)?;
                g.matmul(p, v[2])
            }),
        )
    });
}

pub type Group = fn(&mut Vec<OpReport>);

#[allow(dead_code)]
pub const GROUPS: &[(&str, Group)] = &[
    ("matmul_shared_right_operand", matmul_shared_right_operand),
    ("matmul_batched", matmul_batched),
    ("matmul_transposed", matmul_transposed),
    ("add_and_mul_broadcast", add_and_mul_broadcast),
    ("scale", scale),
    ("softmax_and_log_softmax", softmax_and_log_softmax),
    ("layer_norm", layer_norm),
    ("gelu_and_sigmoid", gelu_and_sigmoid),
    ("embedding_with_repeated_ids", embedding_with_repeated_ids),
    ("transpose_reshape_slice", transpose_reshape_slice),
    ("concat", concat),
    ("sum_and_mean", sum_and_mean),
    ("cross_entropy_with_ignored_rows", cross_entropy_with_ignored_rows),
    ("bce_with_logits_weighted", bce_with_logits_weighted),
    ("attention_block_composite", attention_block_composite),
];

#[allow(dead_code)]
pub fn run_all() -> Vec<OpReport> {
    let mut out = Vec::new();
    for (_, g) in GROUPS {
        g(&mut out);
    }
    out
}
