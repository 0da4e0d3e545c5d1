//! Finite-difference sweep over every tape op on random shapes. Each case
//! reduces the op output to a scalar through random weights, so every output
//! element contributes to the checked gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff_check, Conv1dSpec, Result, Tape, Tensor, Var};

/// Worst relative gradient error seen for one op.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    pub worst: f64,
}

const EPS: f64 = 1e-6;

type Build = dyn Fn(&mut Tape<f64>, Var) -> Result<Var>;

struct Case {
    input: Tensor<f64>,
    build: Box<Build>,
}

fn shape(rng: &mut ChaCha8Rng, min_rank: usize) -> Vec<usize> {
    let rank = rng.random_range(min_rank.max(1)..=3);
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

fn filled(rng: &mut ChaCha8Rng, shape: &[usize], gen: &dyn Fn(&mut ChaCha8Rng) -> f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n).map(|_| gen(rng)).collect();
    Tensor::new(shape.to_vec(), v).expect("positive dims")
}

fn uniform(lo: f64, hi: f64) -> impl Fn(&mut ChaCha8Rng) -> f64 {
    move |r: &mut ChaCha8Rng| r.random_range(lo..hi)
}

/// Magnitude in `[lo, hi)` with a random sign.
fn signed(lo: f64, hi: f64) -> impl Fn(&mut ChaCha8Rng) -> f64 {
    move |r: &mut ChaCha8Rng| {
        let m = r.random_range(lo..hi);
        if r.random::<bool>() { m } else { -m }
    }
}

/// Reduce `y` to a scalar with fixed random weights.
fn weighted(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone())?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Wrap an op so the checked scalar is a random weighting of its output.
fn case<F>(rng: &mut ChaCha8Rng, input: Tensor<f64>, op: F) -> Case
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static,
{
    let mut probe = Tape::new();
    let x = probe.constant(input.clone()).expect("finite input");
    let y = op(&mut probe, x).expect("suite builds valid cases");
    let out_shape = probe.shape(y).expect("own var").to_vec();
    let weights = filled(rng, &out_shape, &uniform(-1.0, 1.0));
    Case {
        input,
        build: Box::new(move |t, x| {
            let y = op(t, x)?;
            weighted(t, y, &weights)
        }),
    }
}

/// Rhs shapes the binary ops accept for a given lhs.
fn rhs_shape(rng: &mut ChaCha8Rng, lhs: &[usize]) -> Vec<usize> {
    match rng.random_range(0..3) {
        0 => lhs.to_vec(),
        1 => lhs[rng.random_range(0..lhs.len())..].to_vec(),
        _ => lhs.iter().map(|&d| if rng.random::<bool>() { 1 } else { d }).collect(),
    }
}

fn unary(rng: &mut ChaCha8Rng, gen: &dyn Fn(&mut ChaCha8Rng) -> f64, op: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Case {
    let s = shape(rng, 1);
    let x = filled(rng, &s, gen);
    case(rng, x, op)
}

fn binary(rng: &mut ChaCha8Rng, kind: usize, wrt_rhs: bool) -> Case {
    let lhs = shape(rng, 1);
    let rhs = rhs_shape(rng, &lhs);
    let rhs_gen = if kind == 3 { signed(0.5, 2.0) } else { signed(0.0, 2.0) };
    let a = filled(rng, &lhs, &uniform(-2.0, 2.0));
    let b = filled(rng, &rhs, &rhs_gen);
    let apply = move |t: &mut Tape<f64>, a: Var, b: Var| match kind {
        0 => t.add(a, b),
        1 => t.sub(a, b),
        2 => t.mul(a, b),
        _ => t.div(a, b),
    };
    if wrt_rhs {
        case(rng, b, move |t, x| {
            let c = t.constant(a.clone())?;
            apply(t, c, x)
        })
    } else {
        case(rng, a, move |t, x| {
            let c = t.constant(b.clone())?;
            apply(t, x, c)
        })
    }
}

fn matmul(rng: &mut ChaCha8Rng, wrt_rhs: bool) -> Case {
    let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
    let a = filled(rng, &[m, k], &uniform(-1.0, 1.0));
    let b = filled(rng, &[k, n], &uniform(-1.0, 1.0));
    if wrt_rhs {
        case(rng, b, move |t, x| {
            let c = t.constant(a.clone())?;
            t.matmul(c, x)
        })
    } else {
        case(rng, a, move |t, x| {
            let c = t.constant(b.clone())?;
            t.matmul(x, c)
        })
    }
}

/// Conv with a random stride and padding; `which` selects input, weight or bias.
fn conv(rng: &mut ChaCha8Rng, which: usize) -> Case {
    let (batch, c_in, c_out) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let kernel = rng.random_range(1..=4);
    let len = rng.random_range(kernel..=kernel + 6);
    let stride = rng.random_range(1..=3);
    let spec = Conv1dSpec {
        stride,
        pad_left: rng.random_range(0..kernel),
        pad_right: rng.random_range(0..kernel),
    };
    let x = filled(rng, &[batch, c_in, len], &uniform(-1.0, 1.0));
    let w = filled(rng, &[c_out, c_in, kernel], &uniform(-1.0, 1.0));
    let b = filled(rng, &[c_out], &uniform(-1.0, 1.0));
    let (xc, wc, bc) = (x.clone(), w.clone(), b.clone());
    match which {
        0 => case(rng, x, move |t, v| {
            let (w, b) = (t.constant(wc.clone())?, t.constant(bc.clone())?);
            t.conv1d(v, w, Some(b), spec)
        }),
        1 => case(rng, w, move |t, v| {
            let (x, b) = (t.constant(xc.clone())?, t.constant(bc.clone())?);
            t.conv1d(x, v, Some(b), spec)
        }),
        _ => case(rng, b, move |t, v| {
            let (x, w) = (t.constant(xc.clone())?, t.constant(wc.clone())?);
            t.conv1d(x, w, Some(v), spec)
        }),
    }
}

fn axis_case(rng: &mut ChaCha8Rng, mean: bool) -> Case {
    let s = shape(rng, 1);
    let axis = rng.random_range(0..s.len());
    let x = filled(rng, &s, &uniform(-2.0, 2.0));
    case(rng, x, move |t, v| if mean { t.mean_axis(v, axis) } else { t.sum_axis(v, axis) })
}

fn scalar_reduce(rng: &mut ChaCha8Rng, mean: bool) -> Case {
    let s = shape(rng, 1);
    let x = filled(rng, &s, &uniform(-2.0, 2.0));
    let c = rng.random_range(-1.0..1.0);
    Case {
        input: x,
        build: Box::new(move |t, v| {
            let y = if mean { t.mean(v)? } else { t.sum(v)? };
            let y = t.square(y)?;
            t.scale(y, c)
        }),
    }
}

fn concat(rng: &mut ChaCha8Rng) -> Case {
    let s = shape(rng, 1);
    let axis = rng.random_range(0..s.len());
    let mut other = s.clone();
    other[axis] = rng.random_range(1..=3);
    let x = filled(rng, &s, &uniform(-1.0, 1.0));
    let y = filled(rng, &other, &uniform(-1.0, 1.0));
    let first = rng.random::<bool>();
    case(rng, x, move |t, v| {
        let c = t.constant(y.clone())?;
        let parts = if first { [v, c] } else { [c, v] };
        t.concat(&parts, axis)
    })
}

fn slice(rng: &mut ChaCha8Rng) -> Case {
    let s = shape(rng, 1);
    let axis = rng.random_range(0..s.len());
    let len = rng.random_range(1..=s[axis]);
    let start = rng.random_range(0..=s[axis] - len);
    let x = filled(rng, &s, &uniform(-1.0, 1.0));
    case(rng, x, move |t, v| t.slice(v, axis, start, len))
}

fn reshape(rng: &mut ChaCha8Rng) -> Case {
    let s = shape(rng, 1);
    let mut o = s.clone();
    o.reverse();
    let x = filled(rng, &s, &uniform(-1.0, 1.0));
    case(rng, x, move |t, v| {
        let r = t.reshape(v, &o)?;
        t.square(r)
    })
}

fn gather(rng: &mut ChaCha8Rng) -> Case {
    let s = shape(rng, 1);
    let n = rng.random_range(1..=5);
    let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..s[0])).collect();
    let x = filled(rng, &s, &uniform(-1.0, 1.0));
    case(rng, x, move |t, v| t.gather_rows(v, &rows))
}

fn l2(rng: &mut ChaCha8Rng) -> Case {
    let s = shape(rng, 1);
    let x = filled(rng, &s, &signed(0.2, 1.5));
    case(rng, x, |t, v| t.l2_normalize(v))
}

fn scaled(rng: &mut ChaCha8Rng, offset: bool) -> Case {
    let s = shape(rng, 1);
    let c = rng.random_range(-3.0..3.0);
    let x = filled(rng, &s, &uniform(-2.0, 2.0));
    case(rng, x, move |t, v| if offset { t.offset(v, c) } else { t.scale(v, c) })
}

fn clamp(rng: &mut ChaCha8Rng) -> Case {
    let s = shape(rng, 1);
    // Keep every value at least 0.05 from the bounds.
    let x = filled(rng, &s, &|r: &mut ChaCha8Rng| match r.random_range(0..3) {
        0 => r.random_range(-1.5..-0.55),
        1 => r.random_range(-0.45..0.45),
        _ => r.random_range(0.55..1.5),
    });
    case(rng, x, |t, v| t.clamp(v, -0.5, 0.5))
}

const OPS: &[&str] = &[
    "add", "add_rhs", "sub", "sub_rhs", "mul", "mul_rhs", "div", "div_rhs", "scale", "offset", "matmul", "matmul_rhs",
    "conv1d_input", "conv1d_weight", "conv1d_bias", "relu", "tanh", "sin", "cos", "acos", "square", "sqrt", "clamp",
    "sum", "mean", "sum_axis", "mean_axis", "l2_normalize", "concat", "slice", "reshape", "gather_rows",
];

fn make(rng: &mut ChaCha8Rng, op: &str) -> Case {
    match op {
        "add" => binary(rng, 0, false),
        "add_rhs" => binary(rng, 0, true),
        "sub" => binary(rng, 1, false),
        "sub_rhs" => binary(rng, 1, true),
        "mul" => binary(rng, 2, false),
        "mul_rhs" => binary(rng, 2, true),
        "div" => binary(rng, 3, false),
        "div_rhs" => binary(rng, 3, true),
        "scale" => scaled(rng, false),
        "offset" => scaled(rng, true),
        "matmul" => matmul(rng, false),
        "matmul_rhs" => matmul(rng, true),
        "conv1d_input" => conv(rng, 0),
        "conv1d_weight" => conv(rng, 1),
        "conv1d_bias" => conv(rng, 2),
        "relu" => unary(rng, &signed(0.1, 2.0), |t, v| t.relu(v)),
        "tanh" => unary(rng, &uniform(-2.0, 2.0), |t, v| t.tanh(v)),
        "sin" => unary(rng, &uniform(-3.0, 3.0), |t, v| t.sin(v)),
        "cos" => unary(rng, &uniform(-3.0, 3.0), |t, v| t.cos(v)),
        "acos" => unary(rng, &uniform(-0.9, 0.9), |t, v| t.acos(v)),
        "square" => unary(rng, &uniform(-2.0, 2.0), |t, v| t.square(v)),
        "sqrt" => unary(rng, &uniform(0.5, 3.0), |t, v| t.sqrt(v)),
        "clamp" => clamp(rng),
        "sum" => scalar_reduce(rng, false),
        "mean" => scalar_reduce(rng, true),
        "sum_axis" => axis_case(rng, false),
        "mean_axis" => axis_case(rng, true),
        "l2_normalize" => l2(rng),
        "concat" => concat(rng),
        "slice" => slice(rng),
        "reshape" => reshape(rng),
        _ => gather(rng),
    }
}

/// Names of every checked op, in suite order.
pub fn suite_ops() -> &'static [&'static str] {
    OPS
}

/// Check every op on `cases_per_op` random shapes in `f64`.
pub fn op_suite(seed: u64, cases_per_op: usize) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    OPS.iter()
        .map(|&op| {
            let mut worst = 0.0f64;
            for _ in 0..cases_per_op {
                let c = make(&mut rng, op);
                worst = worst.max(finite_diff_check(&*c.build, &c.input, EPS)?);
            }
            Ok(OpCheck {
                op,
                cases: cases_per_op,
                worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_a_few_shapes() {
        for c in op_suite(1, 3).unwrap() {
            assert!(c.worst <= 1e-3, "{} worst {}", c.op, c.worst);
        }
    }
}
