use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: Real,
    pub worst_coord: usize,
    pub checked: usize,
}

/// Compares the tape gradient of a scalar function against central finite
/// differences at every coordinate of `point`.
///
/// Returns `max |analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: Real) -> Result<Real>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let analytic = {
        let tape = Tape::new();
        let x = tape.leaf(&point.detach().with_grad());
        let y = f(&tape, x)?;
        tape.backward(y)?.tensor(x).into_data()
    };
    let eval = |coord: usize, delta: Real| -> Result<Real> {
        let mut p = point.detach();
        p.data_mut()[coord] += delta;
        let tape = Tape::new();
        let x = tape.leaf(&p);
        let y = f(&tape, x)?;
        Ok(y.item())
    };
    let coords: Vec<usize> = (0..point.numel()).collect();
    Ok(grad_check_coords(&analytic, eval, &coords, step)?.max_rel_err)
}

/// Finite-difference check on a chosen subset of coordinates.
///
/// `eval(coord, delta)` must return the scalar objective with coordinate
/// `coord` shifted by `delta`.
pub fn grad_check_coords(
    analytic: &[Real],
    mut eval: impl FnMut(usize, Real) -> Result<Real>,
    coords: &[usize],
    step: Real,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        checked: 0,
    };
    for &c in coords {
        let plus = eval(c, step)?;
        let minus = eval(c, -step)?;
        let a = analytic[c];
        if !plus.is_finite() || !minus.is_finite() || !a.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite value at coordinate {c}: f(+h)={plus}, f(-h)={minus}, analytic={a}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = c;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::{exp, mul, sum};

    #[test]
    fn reports_non_finite_coordinate() {
        let x = Tensor::new(&[2], vec![1.0, 800.0]).unwrap();
        let err = grad_check(|_, x| Ok(sum(exp(x))), &x, 1e-5).unwrap_err();
        assert!(err.to_string().contains("coordinate"), "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let analytic = [1.0, 0.0];
        let report =
            grad_check_coords(&analytic, |c, d| Ok(if c == 1 { 3.0 * d } else { d }), &[0, 1], 1e-4)
                .unwrap();
        assert_eq!(report.worst_coord, 1);
        assert!((report.max_rel_err - 3.0).abs() < 1e-9);
    }

    #[test]
    fn cubic_passes() {
        let x = Tensor::new(&[3], vec![0.5, -1.5, 2.0]).unwrap();
        let err = grad_check(|_, x| Ok(sum(mul(mul(x, x)?, x)?)), &x, 1e-5).unwrap();
        assert!(err < 1e-8);
    }
}
