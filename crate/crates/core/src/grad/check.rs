use super::{Tape, Var};
use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest per-coordinate relative error.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tape_grad: Vec<f64>,
    pub numeric_grad: Vec<f64>,
}

/// Coordinates whose gradient is below this fraction of the largest
/// gradient magnitude are compared against that floor instead of their own
/// magnitude, so round-off on near-zero entries does not dominate.
pub const RELATIVE_FLOOR: f64 = 1e-2;

/// Checks the tape gradient of the scalar function `f` at `point` against
/// central finite differences with step `eps`.
///
/// Relative error per coordinate is `|g - fd| / max(|g|, |fd|, floor)` with
/// `floor = RELATIVE_FLOOR * max(‖g‖∞, ‖fd‖∞)`.
pub fn grad_check<T, F>(f: F, point: &DenseArray<T>, eps: T) -> Result<GradCheck>
where
    T: Scalar,
    F: for<'t> Fn(Var<'t, T>) -> Result<Var<'t, T>>,
{
    if !(eps > T::zero()) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(x)?;
    let y_val = y.value();
    if !y_val.all_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let tape_grad: Vec<f64> = y
        .backward()?
        .get_or_zeros(x)
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect();

    let eval = |p: DenseArray<T>| -> Result<f64> {
        let tape = Tape::no_grad();
        let v = f(tape.leaf(p, false))?.value().item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v.as_f64())
    };
    let mut numeric_grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        // actual step after rounding to T
        let h = (plus.data()[i] - minus.data()[i]).as_f64();
        numeric_grad.push((eval(plus)? - eval(minus)?) / h);
    }

    let scale = tape_grad
        .iter()
        .chain(&numeric_grad)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (RELATIVE_FLOOR * scale).max(f64::MIN_POSITIVE);
    let mut max_rel_error = 0.0f64;
    let mut max_abs_error = 0.0f64;
    for (g, n) in tape_grad.iter().zip(&numeric_grad) {
        let abs = (g - n).abs();
        max_abs_error = max_abs_error.max(abs);
        max_rel_error = max_rel_error.max(abs / g.abs().max(n.abs()).max(floor));
    }
    Ok(GradCheck {
        max_rel_error,
        max_abs_error,
        tape_grad,
        numeric_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::detach;

    #[test]
    fn polynomial_is_exact_enough() {
        let p = DenseArray::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(|x| x.mul(x)?.sum(), &p, 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn detached_branch_contributes_nothing() {
        let p = DenseArray::<f64>::from_f64(&[2], &[0.3, -1.2]).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(p, true);
        let y = detach(x).exp().sum().unwrap();
        let g = y.backward().unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let p = DenseArray::<f64>::zeros(&[1]);
        assert!(grad_check(|x| x.sum(), &p, 0.0).is_err());
    }

    #[test]
    fn rejects_non_finite_objective() {
        let p = DenseArray::<f64>::from_f64(&[1], &[1000.0]).unwrap();
        let err = grad_check(|x| x.exp().exp().sum(), &p, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
