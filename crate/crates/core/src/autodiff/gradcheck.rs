use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default central-difference step for 64-bit checks.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)` for a
/// scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    grad_check_many(|tape, vars| f(tape, &vars[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.value().len() != 1 {
        return Err(Error::Shape("grad_check needs a scalar function".into()));
    }
    let grads = tape.backward(&out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<f64>> = xs.iter().map(|t| Var::constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.data()[0])
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..work[t].len() {
            let orig = work[t].data[i];
            work[t].data[i] = orig + eps;
            let plus = eval(&work)?;
            work[t].data[i] = orig - eps;
            let minus = eval(&work)?;
            work[t].data[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NotFinite("grad_check"));
            }
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
