//! Central finite-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Denominator floor in the relative error.
const REL_FLOOR: f64 = 1e-8;

/// Maximum over all elements of `x` of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` builds a scalar from `x` on a fresh tape. It is probed twice before
/// differentiation; differing outputs are rejected as non-deterministic.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, step, &coords)
}

/// Like [`grad_check`] but only perturbs the listed flat coordinates.
pub fn grad_check_coords<T, F>(mut f: F, x: &Tensor<T>, step: T, coords: &[usize]) -> Result<T>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    fn eval<T: Scalar>(f: &mut impl FnMut(&mut Tape<T>, Var) -> Result<Var>, input: Tensor<T>) -> Result<T> {
        let mut tape = Tape::new();
        let v = tape.constant(input);
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    }

    let first = eval(&mut f, x.clone())?;
    let second = eval(&mut f, x.clone())?;
    if first != second {
        return Err(Error::NonDeterministic((first - second).abs().to_f64_lossy()));
    }

    let analytic = {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let out = f(&mut tape, v)?;
        if tape.value(out).numel() != 1 {
            return Err(shape_err!("grad_check needs a scalar function"));
        }
        tape.backward(out)?;
        tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
    };

    let two = T::one() + T::one();
    let floor = T::from_f64_lossy(REL_FLOOR);
    let mut worst = T::zero();
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + step;
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data()[i] - step;
        let numeric = (eval(&mut f, plus)? - eval(&mut f, minus)?) / (two * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}
