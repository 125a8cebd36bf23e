use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-6;

/// Compares the tape's analytic gradient of the scalar `f` with central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε`, element by element, and returns the
/// worst relative error `|a − n| / max(|a|, |n|, 1e-6)`.
///
/// `f` receives the parameters as tape variables in the order given.
pub fn gradient_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradient_check_probes(f, params, eps, usize::MAX)
}

/// Like [`gradient_check`], probing at most `max_probes` evenly spaced
/// elements of each parameter.
pub fn gradient_check_probes<F>(f: F, params: &[Tensor], eps: f64, max_probes: usize) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|p| t.constant(p.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(t.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, &var) in vars.iter().enumerate() {
        let len = params[pi].len();
        let analytic = grads.get(var).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; len]);
        let step = if len <= max_probes { 1 } else { len.div_ceil(max_probes) };
        for j in (0..len).step_by(step.max(1)) {
            let base = params[pi].data()[j];
            work[pi] = with_element(&params[pi], j, base + eps);
            let plus = eval(&work)?;
            work[pi] = with_element(&params[pi], j, base - eps);
            let minus = eval(&work)?;
            work[pi] = params[pi].clone();
            let numeric = (plus - minus) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "non-finite finite difference at parameter {pi}, element {j}"
                )));
            }
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn with_element(t: &Tensor, index: usize, value: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[index] = value;
    Tensor::new(t.shape(), data).expect("same shape")
}
