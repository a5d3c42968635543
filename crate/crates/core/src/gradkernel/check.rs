use super::tensor::ParamSet;
use crate::error::{DspnError, Result};

/// One evaluation of a scalar loss.
///
/// The closure handed to [`check_gradient`] writes its analytic gradient into
/// the accumulators of the `ParamSet` it receives. `activity` lists the side of
/// every kink (ReLU pre-activation sign, hinge active/inactive) so that
/// coordinates whose perturbation crosses a kink can be skipped.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub loss: f64,
    pub activity: Vec<bool>,
}

impl Evaluation {
    pub fn smooth(loss: f64) -> Self {
        Evaluation {
            loss,
            activity: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    /// Combine two reports, keeping the worse coordinate.
    pub fn merge(mut self, other: GradCheckReport) -> GradCheckReport {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
            self.worst_analytic = other.worst_analytic;
            self.worst_numeric = other.worst_numeric;
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
        self
    }
}

/// Denominator floor used by [`relative_error`] and [`check_gradient`].
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floor(analytic, numeric, DEFAULT_FLOOR)
}

pub fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradient of `loss_fn` at `params` with central
/// differences `(f(θ+h) − f(θ−h)) / 2h`, one coordinate at a time.
pub fn check_gradient<F>(loss_fn: F, params: &ParamSet, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut ParamSet) -> Result<Evaluation>,
{
    check_gradient_with(loss_fn, params, h, DEFAULT_FLOOR)
}

/// [`check_gradient`] with a different denominator floor. Useful when some
/// gradients are structurally zero and the difference quotient is pure
/// rounding noise.
pub fn check_gradient_with<F>(loss_fn: F, params: &ParamSet, h: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut ParamSet) -> Result<Evaluation>,
{
    if !(h > 0.0) {
        return Err(DspnError::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut work = params.clone();
    work.zero_grad();
    let base = loss_fn(&mut work)?;
    if !base.loss.is_finite() {
        return Err(DspnError::NonFinite("loss at the unperturbed point".into()));
    }
    let analytic: Vec<Vec<f64>> = work
        .ids()
        .map(|id| work.grad(id).as_slice().to_vec())
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    let ids: Vec<_> = work.ids().collect();
    for id in ids {
        for idx in 0..work.value(id).len() {
            let orig = work.value(id).as_slice()[idx];

            work.value_mut(id).as_mut_slice()[idx] = orig + h;
            let plus = loss_fn(&mut work)?;
            work.value_mut(id).as_mut_slice()[idx] = orig - h;
            let minus = loss_fn(&mut work)?;
            work.value_mut(id).as_mut_slice()[idx] = orig;

            if !plus.loss.is_finite() || !minus.loss.is_finite() {
                return Err(DspnError::NonFinite(format!(
                    "loss after perturbing {}[{idx}]",
                    work.name(id)
                )));
            }
            if plus.activity != minus.activity || plus.activity != base.activity {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * h);
            let a = analytic[id.0][idx];
            let err = relative_error_floor(a, numeric, floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((work.name(id).to_string(), idx));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradkernel::tensor::Tensor;

    fn scalar_params(x: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::vector(vec![x]));
        ps
    }

    #[test]
    fn square_at_three() {
        let ps = scalar_params(3.0);
        let report = check_gradient(
            |p| {
                let id = p.id("x").unwrap();
                let x = p.value(id).as_slice()[0];
                p.grad_mut(id).as_mut_slice()[0] += 2.0 * x;
                Ok(Evaluation::smooth(x * x))
            },
            &ps,
            1e-5,
        )
        .unwrap();
        assert!((report.worst_numeric - 6.0).abs() < 1e-9);
        assert_eq!(report.worst_analytic, 6.0);
        assert!(report.max_rel_error < 1e-8);
        assert_eq!(report.checked, 1);
    }

    #[test]
    fn constant_has_zero_error() {
        let ps = scalar_params(-1.5);
        let report = check_gradient(|_| Ok(Evaluation::smooth(4.0)), &ps, 1e-5).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let ps = scalar_params(1.0);
        let err = check_gradient(|_| Ok(Evaluation::smooth(f64::NAN)), &ps, 1e-5);
        assert!(matches!(err, Err(DspnError::NonFinite(_))));
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let ps = scalar_params(2.0);
        let report = check_gradient(
            |p| {
                let id = p.id("x").unwrap();
                let x = p.value(id).as_slice()[0];
                p.grad_mut(id).as_mut_slice()[0] += x; // should be 2x
                Ok(Evaluation::smooth(x * x))
            },
            &ps,
            1e-5,
        )
        .unwrap();
        assert!((report.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn kink_crossing_is_skipped() {
        let ps = scalar_params(0.0);
        let report = check_gradient(
            |p| {
                let id = p.id("x").unwrap();
                let x = p.value(id).as_slice()[0];
                if x > 0.0 {
                    p.grad_mut(id).as_mut_slice()[0] += 1.0;
                }
                Ok(Evaluation {
                    loss: x.max(0.0),
                    activity: vec![x > 0.0],
                })
            },
            &ps,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 0);
    }
}
