use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares analytic gradients of `loss_fn` with central differences.
///
/// `loss_fn` receives a fresh tape and one leaf per entry of `params`, and
/// must return a scalar. It is called once for the analytic pass and twice
/// per parameter element, so any randomness inside must be reseeded on
/// every call.
///
/// Returns `max |analytic - numeric| / max(1, |numeric|)` over all elements.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        let v = tape.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {v} in gradient check")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        for i in 0..params[p].numel() {
            let original = params[p].data()[i];
            probe[p].data_mut()[i] = original + eps;
            let plus = eval(&probe)?;
            probe[p].data_mut()[i] = original - eps;
            let minus = eval(&probe)?;
            probe[p].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
