use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Input index and flat coordinate where the max was attained.
    pub worst: (usize, usize),
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives a fresh wide-precision tape with every input registered as a
/// trainable leaf and must return a scalar.
pub fn finite_difference_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<(f64, Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out);
        if value.numel() != 1 {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        Ok((value.item(), tape, vars, out))
    };

    let (_, tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).expect("trainable leaf has gradient").data().to_vec())
        .collect();

    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0) };
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + eps;
            let (plus, ..) = eval(&work)?;
            work[i].data_mut()[j] = x0 - eps;
            let (minus, ..) = eval(&work)?;
            work[i].data_mut()[j] = x0;

            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite { op: "finite_difference", step: None });
            }
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_error {
                report = GradCheck { max_rel_error: rel, worst: (i, j) };
            }
        }
    }
    Ok(report)
}
