use super::{GradError, Result, Tape, Tensor, Var};

/// Compare reverse-mode gradients of a scalar function against central
/// differences, in `f64`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`. Functions
/// with kinks (relu at 0, clamp at its bounds) must be probed away from them;
/// the engine uses subgradient 0 there, which central differences do not see.
pub fn finite_diff_check<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(input.clone())?;
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape.grad(x)?;

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(input.shape().to_vec(), values)?)?;
        let y = f(&mut tape, x)?;
        let v = tape.value(y)?.values()[0];
        if !v.is_finite() {
            return Err(GradError::NonFinite { op: "finite_diff_check" });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for i in 0..input.numel() {
        let mut plus = input.values().to_vec();
        let mut minus = plus.clone();
        plus[i] += eps;
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        // Dyadic inputs and step keep every probe exactly representable.
        let x = Tensor::from_vec(vec![0.25, -1.5, 4.0]);
        let err = finite_diff_check(|t, v| t.sum(v), &x, 2f64.powi(-13)).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_of_squares_is_tight() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0, 2.5]);
        let err = finite_diff_check(
            |t, v| {
                let s = t.square(v)?;
                t.sum(s)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn non_finite_function_is_reported() {
        // sqrt at 0: forward finite, but the -eps probe is not.
        let x = Tensor::from_vec(vec![0.0]);
        let r = finite_diff_check(
            |t, v| {
                let s = t.offset(v, 1e-6)?;
                let r = t.sqrt(s)?;
                t.sum(r)
            },
            &x,
            1e-4,
        );
        assert!(r.is_err());
    }
}
