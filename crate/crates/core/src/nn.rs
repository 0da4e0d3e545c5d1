//! Parameter storage and layer helpers shared by the embedder and the
//! generator. Weights live as `f32` tensors; a forward pass binds them onto a
//! tape in whatever scalar type the caller runs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::grad::{Adam, Conv1dSpec, GradError, Scalar, Tape, Tensor, Var};

/// Uniform init in `±sqrt(6 / fan_in)` (He) or `±sqrt(6 / (fan_in + fan_out))`.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-bound..=bound) as f32).collect();
    Tensor::new(shape.to_vec(), values).expect("positive dims")
}

pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Put every parameter on the tape, as trainable leaves or constants.
pub fn bind<S: Scalar>(tape: &mut Tape<S>, params: &[Tensor<f32>], trainable: bool) -> Result<Vec<Var>, GradError> {
    params
        .iter()
        .map(|p| {
            let t = p.cast::<S>();
            if trainable {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        })
        .collect()
}

/// Convolution with bias.
pub fn conv<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Var, stride: usize) -> Result<Var, GradError> {
    let kernel = tape.shape(w)?[2];
    tape.conv1d(x, w, Some(b), Conv1dSpec::same(kernel, stride))
}

/// `x @ w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
pub fn dense<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Result<Var, GradError> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Scale each `[2, len]` element to unit mean power (receiver AGC).
pub fn unit_power<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<Var, GradError> {
    let shape = tape.shape(x)?.to_vec();
    let (n, len) = (shape[0], shape[2]);
    let sq = tape.square(x)?;
    let flat = tape.reshape(sq, &[n, 2 * len])?;
    // Mean over I and Q samples is half the mean complex power.
    let half_power = tape.mean_axis(flat, 1)?;
    let power = tape.scale(half_power, S::of(2.0))?;
    let power = tape.offset(power, S::of(1e-12))?;
    let rms = tape.sqrt(power)?;
    let rms = tape.reshape(rms, &[n, 1, 1])?;
    tape.div(x, rms)
}

/// Collect gradients for `vars` after `backward` and step the optimiser.
pub fn adam_update<S: Scalar>(
    opt: &mut Adam<f32>,
    tape: &Tape<S>,
    vars: &[Var],
    params: &mut [Tensor<f32>],
) -> Result<(), GradError> {
    let grads = vars
        .iter()
        .map(|&v| Ok(tape.grad(v)?.into_iter().map(|g| g.as_f64() as f32).collect()))
        .collect::<Result<Vec<Vec<f32>>, GradError>>()?;
    opt.step(params.iter_mut().map(|p| p.values_mut()).collect(), &grads)
}

pub fn param_count(params: &[Tensor<f32>]) -> usize {
    params.iter().map(|p| p.numel()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn unit_power_normalises_each_element() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .constant(Tensor::new(vec![2, 2, 2], vec![3.0, 0.0, 0.0, 4.0, 1.0, 1.0, 1.0, 1.0]).unwrap())
            .unwrap();
        let y = unit_power(&mut tape, x).unwrap();
        let v = tape.value(y).unwrap().values();
        for e in v.chunks(4) {
            let p = (e[0] * e[0] + e[2] * e[2] + e[1] * e[1] + e[3] * e[3]) / 2.0;
            assert!((p - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn init_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = uniform_init(&mut rng, &[4, 3, 9], he_bound(27));
        assert!(t.values().iter().all(|&v| (v as f64).abs() <= he_bound(27)));
    }
}
