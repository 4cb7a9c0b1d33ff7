//! Central finite-difference gradient checker.

use super::tape::{Tape, Var};
use super::{NumericsError, Tensor};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Floor for the relative-error denominator, scaled by `max(1, |f(x)|)`.
///
/// Central differences at h = 1e-6 carry a rounding error of roughly
/// `ε_machine · |f| / h`, so components much smaller than this floor are
/// compared absolutely instead of relatively.
pub const REL_GUARD: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Maximum relative error between the analytic and the central-difference
/// gradient of the scalar function `f` at `x`, over every element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor) -> Result<f64, NumericsError>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>, NumericsError>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_indices(f, x, &all).map(|r| r.max_rel_error)
}

/// Like [`grad_check`] but only probes the listed element indices.
pub fn grad_check_indices<F>(f: F, x: &Tensor, indices: &[usize]) -> Result<GradCheckReport, NumericsError>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>, NumericsError>,
{
    x.ensure_finite("grad_check")?;
    let tape = Tape::new();
    let input = tape.param(x.clone());
    let out = f(input)?;
    let f0 = out.value().item()?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(&input).expect("param has a gradient");

    let eval = |probe: Tensor| -> Result<f64, NumericsError> {
        let tape = Tape::new();
        f(tape.constant(probe))?.item()
    };
    let guard = REL_GUARD * f0.abs().max(1.0);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(guard);
        if err > report.max_rel_error || i == indices[0] {
            report =
                GradCheckReport { max_rel_error: err.max(report.max_rel_error), worst_index: i, analytic: a, numeric };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn([3, 4], |i| (i as f64 - 6.0) / 64.0);
        let err = grad_check(|v| Ok(v.sum()), &x).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::zeros([3]);
        assert!(matches!(grad_check(|v| Ok(v.square()), &x), Err(NumericsError::NonScalar { .. })));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // square with a backward that forgets the factor 2
        fn bad_square(v: Var<'_>) -> Var<'_> {
            let x = v.value();
            v.tape().push(x.map(|a| a * a), &[v], Box::new(move |g| vec![Some(g.zip_map(&x, |g, a| g * a))]))
        }
        let x = Tensor::from_vec(vec![0.3, -0.7]);
        let err = grad_check(|v| Ok(bad_square(v).sum()), &x).unwrap();
        assert!(err > 0.4, "{err}");
        let err = grad_check(|v| Ok(v.square().sum()), &x).unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
