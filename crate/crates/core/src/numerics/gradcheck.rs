//! Central finite-difference gradient oracle.

use crate::error::{Error, Result};
use crate::numerics::tape::{Fault, Tape, Var};
use crate::numerics::tensor::Tensor;

/// Outcome of comparing an analytic gradient to central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flat coordinate where `max_rel_error` was observed.
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Checks the tape gradient of the scalar function built by `f` at `z`.
///
/// `f` records its computation on the tape it is given; it is evaluated once
/// with `z` as a tracked leaf for the analytic gradient and `2 * numel(z)`
/// more times with `z +/- step * e_k` for the numeric one. Relative error per
/// coordinate uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, z: &Tensor, step: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_with_fault(f, z, step, None)
}

#[doc(hidden)]
pub fn check_with_fault<F>(f: F, z: &Tensor, step: f64, fault: Option<Fault>) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(Error::Input(format!("finite-difference step must be > 0, got {step}")));
    }
    let analytic = {
        let tape = Tape::new();
        tape.inject_fault(fault);
        let leaf = tape.leaf(z.clone());
        let out = f(&tape, leaf)?;
        let value = out.item()?;
        if !value.is_finite() {
            return Err(Error::Evaluation(format!("f(z) = {value}")));
        }
        tape.backward(out)?.wrt(leaf)
    };

    let eval = |point: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let leaf = tape.constant(point);
        let v = f(&tape, leaf)?.item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation(format!("f evaluated to {v}")))
        }
    };

    let base = z.data().to_vec();
    let mut numeric = Vec::with_capacity(base.len());
    for k in 0..base.len() {
        let mut plus = base.clone();
        plus[k] += step;
        let mut minus = base.clone();
        minus[k] -= step;
        let fp = eval(Tensor::new(z.shape(), plus)?)?;
        let fm = eval(Tensor::new(z.shape(), minus)?)?;
        numeric.push((fp - fm) / (2.0 * step));
    }
    let numeric = Tensor::new(z.shape(), numeric)?;

    let (worst_index, max_rel_error) = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .enumerate()
        .fold((0, 0.0), |best, (k, e)| if e > best.1 { (k, e) } else { best });

    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let z = Tensor::new(&[2, 2], vec![0.3, -1.2, 4.0, 2.5]).unwrap();
        let check = finite_diff_check(|_, z| z.sum_all(), &z, 1e-3).unwrap();
        assert!(check.max_rel_error < 1e-12, "{}", check.max_rel_error);
    }

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let z = Tensor::from_vec(vec![3.0, 4.0, -0.5]);
        let check = finite_diff_check(
            |_, z| z.square()?.sum_all()?.scale(0.5),
            &z,
            1e-3,
        )
        .unwrap();
        assert!(check.max_rel_error <= 1e-9, "{}", check.max_rel_error);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_values() {
        let z = Tensor::from_vec(vec![1.0]);
        assert!(finite_diff_check(|_, z| z.sum_all(), &z, 0.0).is_err());
        let z = Tensor::from_vec(vec![0.0]);
        let err = finite_diff_check(|_, z| z.ln()?.sum_all(), &z, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let z = Tensor::from_vec(vec![0.1, 0.7, -0.4]);
        fn f<'t>(tape: &'t Tape, z: Var<'t>) -> Result<Var<'t>> {
            let w = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
            z.softmax_lastdim()?.mul(w)?.sum_all()
        }
        let ok = finite_diff_check(f, &z, 1e-5).unwrap();
        assert!(ok.max_rel_error < 1e-6);
        let bad = check_with_fault(f, &z, 1e-5, Some(Fault::SoftmaxGradScale(1.5))).unwrap();
        assert!(bad.max_rel_error > 0.1);
    }
}
