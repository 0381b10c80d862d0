//! Finite-difference verification of analytic gradients.

use crate::diffcore::{Array, Graph, Var};
use crate::error::{Error, Result};

/// Compare the analytic gradient of `f` at `x` against central differences.
///
/// `f` builds a scalar loss from the supplied leaf; it runs in 64-bit mode.
/// Returns the maximum relative error over elements, with the denominator
/// max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(f: F, x: &Array<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.tape.leaf(x.clone(), true);
    let loss = f(&mut g, leaf)?;
    if g.tape.value(loss).numel() != 1 {
        return Err(Error::Contract("grad_check requires a scalar-valued function".into()));
    }
    if !g.tape.value(loss).data()[0].is_finite() {
        return Err(Error::Numeric("grad_check: non-finite function value".into()));
    }
    g.tape.backward(loss)?;
    let analytic = g.tape.grad_array(leaf);

    let eval = |xs: &Array<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.tape.leaf(xs.clone(), false);
        let loss = f(&mut g, leaf)?;
        let v = g.tape.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric("grad_check: non-finite function value".into()));
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = eval(&Array::from_vec(x.shape().to_vec(), plus))?;
        let fm = eval(&Array::from_vec(x.shape().to_vec(), minus))?;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
