use super::linear::Parameterized;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter tensor and offset of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients with central finite differences on every
/// parameter coordinate.
///
/// `loss` evaluates the objective; `loss_and_grad` evaluates it and writes the
/// analytic gradient into the parameters' accumulators (it is called once,
/// after the accumulators have been zeroed).
pub fn grad_check<P, L, G>(
    params: &mut P,
    epsilon: f64,
    loss: L,
    loss_and_grad: G,
) -> Result<GradCheckReport>
where
    P: Parameterized,
    L: Fn(&P) -> Result<f64>,
    G: FnOnce(&mut P) -> Result<f64>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference epsilon must lie in [1e-6, 1e-3], got {epsilon}"
        )));
    }
    let first = loss(params)?;
    let second = loss(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    params.zero_grads();
    loss_and_grad(params)?;
    let analytic = params.flat_grads();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: analytic.len(),
    };
    for (i, &a) in analytic.iter().enumerate() {
        let mut orig = 0.0;
        params.with_coordinate(i, &mut |v| {
            orig = *v;
            *v = orig + epsilon;
        });
        let up = loss(params)?;
        params.with_coordinate(i, &mut |v| *v = orig - epsilon);
        let down = loss(params)?;
        params.with_coordinate(i, &mut |v| *v = orig);

        let n = (up - down) / (2.0 * epsilon);
        let err = relative_error(a, n);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = params.locate(i);
            report.analytic = a;
            report.numeric = n;
        }
    }
    Ok(report)
}
