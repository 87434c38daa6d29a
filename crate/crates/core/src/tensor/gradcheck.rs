//! Finite-difference verification of analytic gradients.
//!
//! Runs entirely in `f64`; the generic operators instantiate with the same
//! code path used for `f32` training, so agreement here validates the
//! backward rules themselves rather than a parallel implementation.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, ValueId};

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences, returning the maximum relative error
/// `|analytic - numeric| / max(1, |numeric|)` over all coordinates of `x`.
///
/// `f` receives a fresh tape and the id of `x` registered on it, and must
/// return the id of a shape-`[1]` output.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, ValueId) -> Result<ValueId>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArg(format!("grad_check eps must be > 0, got {eps}")));
    }

    let mut tape = Tape::new();
    let xid = tape.param(x.clone());
    let out = f(&mut tape, xid)?;
    let out_val = tape.value(out).scalar_value()?;
    if !out_val.is_finite() {
        return Err(Error::Numeric(format!("non-finite value {out_val} at evaluation point")));
    }
    tape.backward(out)?;
    let analytic = tape.grad(xid).expect("param grad populated").to_vec();

    let mut max_err = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let fp = eval_scalar(&f, &xp)?;
        let fm = eval_scalar(&f, &xm)?;
        let numeric = (fp - fm) / (2.0 * eps);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at coordinate {i}: analytic {}, numeric {numeric}",
                analytic[i]
            )));
        }
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, ValueId) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let xid = tape.param(x.clone());
    let out = f(&mut tape, xid)?;
    let v = tape.value(out).scalar_value()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite value {v} during finite differences")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    #[test]
    fn quadratic_is_exact() {
        // f = sum(x^2): analytic gradient [2, 4] matches central differences
        // to machine precision because the quadratic's third derivative is 0.
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.sum_all(sq))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::<f64>::new(&[3], Fill::Uniform { seed: 3, lo: -1.0, hi: 1.0 }).unwrap();
        let mut tape = Tape::new();
        let xid = tape.param(x.clone());
        let c = tape.leaf(Tensor::scalar(5.0));
        let _ = xid;
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(xid).unwrap(), &[0.0, 0.0, 0.0]);

        let err = grad_check(
            |tape, _x| {
                let c = tape.leaf(Tensor::scalar(5.0));
                Ok(tape.scale(c, 1.0))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn exp_chain() {
        let x = Tensor::<f64>::new(&[4], Fill::Uniform { seed: 11, lo: -1.0, hi: 1.0 }).unwrap();
        let err = grad_check(
            |tape, x| {
                let n = tape.neg(x);
                let e = tape.exp(n);
                Ok(tape.sum_all(e))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }
}
