//! Central finite-difference checks for every differentiable op.
//!
//! Each op output is contracted with a fixed random weight tensor so every
//! output element contributes to the scalar being differentiated. The
//! numeric side evaluates that contraction in f64.

#![allow(dead_code)]

use ndgrad::{Band, ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f32 = 1e-3;
pub const REL_TOL: f64 = 1e-3;
pub const POINTS: u64 = 10;

pub type OpFn = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn forward(op: &OpFn, inputs: &[Tensor]) -> Tensor {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = op(&mut tape, &vars).unwrap();
    tape.value(out).clone()
}

pub fn contract(out: &Tensor, w: &Tensor) -> f64 {
    out.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Returns the worst relative error over all inputs.
pub fn check(op: &OpFn, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> f64 {
    let out_shape = forward(op, inputs).shape().to_vec();
    let weights = random(rng, &out_shape, -1.0, 1.0);

    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.insert(format!("x{i}"), t.clone()).unwrap())
        .collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
    let out = op(&mut tape, &vars).unwrap();
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).unwrap();
        let mut numeric = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let fp = contract(&forward(op, &plus), &weights);
            let fm = contract(&forward(op, &minus), &weights);
            numeric.push((fp - fm) / (2.0 * H as f64));
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| (a as f64 - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.data().iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let scale = na.max(nn).max(1e-6);
        worst = worst.max(diff / scale);
    }
    worst
}

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub range: (f32, f32),
    pub op: Box<OpFn>,
}

pub fn case(
    name: &'static str,
    shapes: &[&[usize]],
    range: (f32, f32),
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        range,
        op: Box::new(op),
    }
}

pub fn cases() -> Vec<Case> {
    let band = Band { behind: 2, ahead: 1, segment: 3 };
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], (-1.0, 1.0), |t, v| t.matmul(v[0], v[1])),
        case("add_broadcast", &[&[3, 4], &[4]], (-1.0, 1.0), |t, v| t.add(v[0], v[1])),
        case("sub", &[&[3, 4], &[3, 4]], (-1.0, 1.0), |t, v| t.sub(v[0], v[1])),
        case("mul_broadcast", &[&[2, 3, 4], &[3, 4]], (-1.0, 1.0), |t, v| t.mul(v[0], v[1])),
        case("scale", &[&[5]], (-1.0, 1.0), |t, v| t.scale(v[0], -1.7)),
        case("concat", &[&[3, 2], &[3, 3]], (-1.0, 1.0), |t, v| t.concat_last(&[v[0], v[1]])),
        case("slice", &[&[3, 5]], (-1.0, 1.0), |t, v| t.slice_last(v[0], 1, 4)),
        case("transpose", &[&[3, 4]], (-1.0, 1.0), |t, v| t.transpose(v[0])),
        case("reshape", &[&[3, 4]], (-1.0, 1.0), |t, v| t.reshape(v[0], &[2, 6])),
        case("softmax", &[&[3, 5]], (-2.0, 2.0), |t, v| t.softmax(v[0])),
        case("layernorm", &[&[4, 6], &[6], &[6]], (-1.0, 1.0), |t, v| t.layernorm(v[0], v[1], v[2])),
        case("gelu", &[&[12]], (-3.0, 3.0), |t, v| t.gelu(v[0])),
        case("sigmoid", &[&[12]], (-3.0, 3.0), |t, v| t.sigmoid(v[0])),
        case("exp", &[&[12]], (-2.0, 2.0), |t, v| t.exp(v[0])),
        case("log", &[&[12]], (0.5, 3.0), |t, v| t.log(v[0])),
        case("sum", &[&[3, 4]], (-1.0, 1.0), |t, v| t.sum(v[0])),
        case("mean", &[&[3, 4]], (-1.0, 1.0), |t, v| t.mean(v[0])),
        // offset keeps |a - b| away from the kink at zero
        case("l1_loss", &[&[10]], (0.0, 1.0), |t, v| {
            let b = t.scale(v[0], -1.0)?;
            let shifted = t.sub(b, v[0])?;
            let a = t.exp(v[0])?;
            t.l1_loss(a, shifted)
        }),
        case("l2_loss", &[&[3, 4], &[3, 4]], (-1.0, 1.0), |t, v| t.l2_loss(v[0], v[1])),
        case("gather_rows", &[&[4, 3]], (-1.0, 1.0), |t, v| t.gather_rows(v[0], &[2, 0, 2, 3, 1])),
        case("shift_rows", &[&[6, 2]], (-1.0, 1.0), |t, v| t.shift_rows(v[0], 1, 3)),
        case("rotary", &[&[4, 6]], (-1.0, 1.0), |t, v| t.rotary(v[0], &[0, 3, 7, 1], 10_000.0)),
        case("band_scores", &[&[6, 4], &[6, 4]], (-1.0, 1.0), move |t, v| {
            let s = t.band_scores(v[0], v[1], band)?;
            // masked slots carry a huge constant; squash before contracting
            t.softmax(s)
        }),
        case("band_mix", &[&[6, 4], &[6, 3]], (0.0, 1.0), move |t, v| t.band_mix(v[0], v[1], band)),
    ]
}

/// Worst relative error of one case over `POINTS` random input draws.
pub fn worst_error(c: &Case) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let inputs: Vec<Tensor> = c
            .shapes
            .iter()
            .map(|s| random(&mut rng, s, c.range.0, c.range.1))
            .collect();
        worst = worst.max(check(c.op.as_ref(), &inputs, &mut rng));
    }
    worst
}
