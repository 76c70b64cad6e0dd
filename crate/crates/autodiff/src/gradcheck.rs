//! Central finite-difference checks of recorded gradients.

use rand::{Rng, RngCore};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

/// Records `f` on fresh inputs; the output may have any shape.
pub type Recorder<'a> = &'a dyn Fn(&mut Graph, &[Var]) -> Var;

fn probed(g: &mut Graph, out: Var, probe: &Tensor) -> Var {
    let p = g.constant(probe.clone());
    let prod = g.mul(out, p).expect("probe matches output shape");
    g.sum(prod)
}

/// Norm-based relative error between the analytic and numeric gradients of
/// `sum(f(inputs) * probe)` over every input, with a random probe so that
/// every output element matters.
pub fn relative_error(inputs: &[Tensor], f: Recorder, rng: &mut dyn RngCore) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let probe = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches");
    let loss = probed(&mut g, out, &probe);
    let grads = g.backward(loss).expect("scalar loss");

    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        let loss = probed(&mut g, out, &probe);
        g.value(loss).data()[0]
    };

    let mut diff2 = 0.0;
    let mut norm_a = 0.0;
    let mut norm_n = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]);
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let a = analytic.data()[j];
            diff2 += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
    }
    diff2.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(1e-8)
}

pub fn uniform(rng: &mut dyn RngCore, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Magnitudes in `[gap, 2)` with random signs, for kinked primitives.
pub fn away_from_zero(rng: &mut dyn RngCore, shape: &[usize], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(gap..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// One differentiable primitive with an input generator.
pub struct Case {
    pub name: &'static str,
    pub inputs: fn(&mut dyn RngCore) -> Vec<Tensor>,
    pub record: fn(&mut Graph, &[Var]) -> Var,
}

fn v(r: &mut dyn RngCore) -> Tensor {
    uniform(r, &[4], -2.0, 2.0)
}

fn m(r: &mut dyn RngCore) -> Tensor {
    uniform(r, &[3, 4], -2.0, 2.0)
}

fn min_inputs(r: &mut dyn RngCore) -> Vec<Tensor> {
    let a = uniform(r, &[4], -2.0, 2.0);
    let shift = away_from_zero(r, &[4], 1e-3);
    let b = Tensor::vector(a.data().iter().zip(shift.data()).map(|(x, s)| x + s).collect());
    vec![a, b]
}

/// Every differentiable primitive of [`Graph`], away from kinks.
pub fn primitives() -> Vec<Case> {
    macro_rules! case {
        ($name:literal, $inputs:expr, $record:expr) => {
            Case {
                name: $name,
                inputs: $inputs,
                record: $record,
            }
        };
    }
    vec![
        case!("add", |r| vec![v(r), v(r)], |g, x| g.add(x[0], x[1]).unwrap()),
        case!("add-bcast", |r| vec![v(r), uniform(r, &[], -1.0, 1.0)], |g, x| g
            .add(x[0], x[1])
            .unwrap()),
        case!("sub", |r| vec![v(r), v(r)], |g, x| g.sub(x[0], x[1]).unwrap()),
        case!("mul", |r| vec![v(r), v(r)], |g, x| g.mul(x[0], x[1]).unwrap()),
        case!("mul-bcast", |r| vec![uniform(r, &[1], -1.0, 1.0), m(r)], |g, x| g
            .mul(x[0], x[1])
            .unwrap()),
        case!("matvec", |r| vec![m(r), v(r)], |g, x| g.matvec(x[0], x[1]).unwrap()),
        case!("matmul", |r| vec![m(r), uniform(r, &[4, 5], -1.0, 1.0)], |g, x| g
            .matmul(x[0], x[1])
            .unwrap()),
        case!("matmul_t", |r| vec![m(r), uniform(r, &[5, 4], -1.0, 1.0)], |g, x| g
            .matmul_t(x[0], x[1])
            .unwrap()),
        case!("dot", |r| vec![v(r), v(r)], |g, x| g.dot(x[0], x[1]).unwrap()),
        case!("add_row", |r| vec![m(r), v(r)], |g, x| g.add_row(x[0], x[1]).unwrap()),
        case!("mul_row", |r| vec![m(r), v(r)], |g, x| g.mul_row(x[0], x[1]).unwrap()),
        case!("scale", |r| vec![v(r)], |g, x| g.scale(x[0], -1.7)),
        case!("offset", |r| vec![v(r)], |g, x| g.offset(x[0], 0.3)),
        case!("sigmoid", |r| vec![m(r)], |g, x| g.sigmoid(x[0])),
        case!("tanh", |r| vec![m(r)], |g, x| g.tanh(x[0])),
        case!("exp", |r| vec![v(r)], |g, x| g.exp(x[0])),
        case!("ln", |r| vec![uniform(r, &[4], 0.2, 3.0)], |g, x| g.ln(x[0]).unwrap()),
        case!("abs", |r| vec![away_from_zero(r, &[4], 1e-3)], |g, x| g.abs(x[0])),
        case!("relu", |r| vec![away_from_zero(r, &[3, 4], 1e-3)], |g, x| g.relu(x[0])),
        case!("sum", |r| vec![m(r)], |g, x| g.sum(x[0])),
        case!("mean", |r| vec![m(r)], |g, x| g.mean(x[0]).unwrap()),
        case!("row_sum", |r| vec![m(r)], |g, x| g.row_sum(x[0])),
        case!("min", min_inputs, |g, x| g.min(x[0], x[1]).unwrap()),
        case!("softmax", |r| vec![m(r)], |g, x| g.softmax(x[0], 1.0).unwrap()),
        case!("softmax-tau", |r| vec![v(r)], |g, x| g.softmax(x[0], 0.4).unwrap()),
        case!("sq_err", |r| vec![v(r), v(r)], |g, x| g.sq_err(x[0], x[1]).unwrap()),
        case!(
            "gaussian_log_pdf",
            |r| vec![v(r), uniform(r, &[4], 0.3, 2.0), v(r)],
            |g, x| g.gaussian_log_pdf(x[0], x[1], x[2]).unwrap()
        ),
        case!("concat_cols", |r| vec![m(r), uniform(r, &[3], -1.0, 1.0)], |g, x| g
            .concat_cols(&[x[0], x[1]])
            .unwrap()),
        case!("column", |r| vec![m(r)], |g, x| g.column(x[0], 2).unwrap()),
        case!(
            "clamp",
            |r| vec![away_from_zero(r, &[4], 1e-3).map(|x| x * 0.5)],
            |g, x| g.clamp(x[0], -0.5, 0.5)
        ),
    ]
}

/// Worst relative error of `case` over `instances` random draws.
pub fn worst_error(case: &Case, instances: usize, rng: &mut dyn RngCore) -> f64 {
    (0..instances)
        .map(|_| {
            let inputs = (case.inputs)(rng);
            relative_error(&inputs, &case.record, rng)
        })
        .fold(0.0, f64::max)
}
