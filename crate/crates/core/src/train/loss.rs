use std::f64::consts::LN_10;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Default additive floor inside both energy terms of the loss.
pub const LOSS_FLOOR: f64 = 1e-8;

/// Negative SI-SDR in dB, averaged over speakers, for `est` `[M, T]` against
/// the fixed references `[M, T]`. Speaker order is taken as given. `floor`
/// is added to the target and residual energies before the log.
pub fn separation_loss(g: &mut Graph, est: Var, reference: &Tensor, floor: f64) -> Result<Var> {
    let shape = g.shape(est).to_vec();
    if shape.len() != 2 || reference.shape() != shape.as_slice() {
        return Err(Error::shape(
            "separation_loss",
            format!("estimate {shape:?} and reference {:?} must both be [M, T]", reference.shape()),
        ));
    }
    let (m, t) = (shape[0], shape[1]);
    let mut terms = Vec::with_capacity(m);
    for i in 0..m {
        let r = reference.row_data(i);
        let energy: f64 = r.iter().map(|v| v * v).sum();
        if energy == 0.0 {
            return Err(Error::Domain(format!("reference {i} has zero power")));
        }
        let r = g.constant(Tensor::new(vec![1, t], r.to_vec())?);
        let e = g.narrow(est, 0, i, 1)?;
        let dot = g.dot(e, r)?;
        let alpha = g.scale(dot, 1.0 / energy)?;
        let target = g.scale_by(r, alpha)?;
        let residual = g.sub(e, target)?;
        let num = g.dot(target, target)?;
        let den = g.dot(residual, residual)?;
        let num = g.add_scalar(num, floor)?;
        let den = g.add_scalar(den, floor)?;
        let (ln_num, ln_den) = (g.ln(num)?, g.ln(den)?);
        let diff = g.sub(ln_den, ln_num)?;
        terms.push(g.scale(diff, 10.0 / LN_10)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    g.scale(total, 1.0 / m as f64)
}
