use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences, over every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, eps, &all)
}

/// As [`grad_check`], restricted to the flat element indices in `probes`.
pub fn grad_check_at<F>(f: F, x: &Tensor, eps: f64, probes: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Contract(format!("grad_check eps must lie in (0, 1e-2], got {eps}")));
    }
    if let Some(&bad) = probes.iter().find(|&&i| i >= x.numel()) {
        return Err(Error::Contract(format!("probe index {bad} out of range for {} elements", x.numel())));
    }
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let loss = f(&mut g, xv)?;
    let grads = g.backward(loss)?;
    let analytic = grads.get(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        let value = g.value(out).data()[0];
        if !value.is_finite() {
            return Err(Error::Evaluation(format!("objective is {value} at a perturbed point")));
        }
        Ok(value)
    };

    let mut worst: f64 = 0.0;
    for &i in probes {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
