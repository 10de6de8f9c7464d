//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::autograd::{no_grad, Var};
use crate::error::Result;
use crate::nn::Param;
use crate::tensor::Tensor;

/// Denominator floor for the relative error, as a fraction of the
/// component's largest analytic gradient (at least 1). Elements far below
/// that scale are compared against finite-difference noise instead of
/// their own vanishing magnitude.
pub const REL_FLOOR: f64 = 1e-6;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub component: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
    /// Parameter holding the worst element.
    pub worst: String,
    /// Analytic and numeric values at the worst element.
    pub worst_pair: (f64, f64),
    pub passed: bool,
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backprop gradients of `loss` against central differences for
/// every scalar of every parameter in `params`.
pub fn check_params<F>(
    component: &str,
    params: &[Param<f64>],
    loss: F,
    eps: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: Fn() -> Result<Var<f64>>,
{
    params.iter().for_each(Param::zero_grad);
    loss()?.backward()?;
    let analytic: Vec<Tensor<f64>> = params.iter().map(Param::grad).collect();

    let scale = analytic
        .iter()
        .flat_map(|g| g.data().iter().map(|v| v.abs()))
        .fold(1.0, f64::max);
    let floor = REL_FLOOR * scale;
    let eval = || -> Result<f64> { no_grad(|| loss().map(|l| l.value().data()[0])) };
    let mut report = GradReport {
        component: component.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        max_abs_grad: 0.0,
        worst: String::new(),
        worst_pair: (0.0, 0.0),
        passed: true,
    };
    for (p, grad) in params.iter().zip(&analytic) {
        let base = p.value();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[i] += eps;
            p.set_value(plus)?;
            let lp = eval()?;
            let mut minus = base.clone();
            minus.data_mut()[i] -= eps;
            p.set_value(minus)?;
            let lm = eval()?;
            p.set_value(base.clone())?;

            let numeric = (lp - lm) / (2.0 * eps);
            let a = grad.data()[i];
            let err = rel_err(a, numeric, floor);
            report.checked += 1;
            report.max_abs_grad = report.max_abs_grad.max(a.abs());
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = format!("{}[{i}]", p.name());
                report.worst_pair = (a, numeric);
            }
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamBuilder;
    use crate::ops;

    #[test]
    fn quadratic_passes() {
        let mut pb = ParamBuilder::<f64>::new(1);
        let x = pb.xavier("x", 2, 3).unwrap();
        let r = x.clone();
        let rep = check_params(
            "square",
            &[x],
            || Ok(ops::sum(&ops::mul(&r.var(), &r.var())?)),
            DEFAULT_EPS,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.checked, 6);
    }

    #[test]
    fn unused_param_reports_zero() {
        let mut pb = ParamBuilder::<f64>::new(1);
        let x = pb.xavier("x", 2, 2).unwrap();
        let frozen = pb.xavier("frozen", 2, 2).unwrap();
        let xr = x.clone();
        let rep = check_params(
            "frozen",
            std::slice::from_ref(&frozen),
            || Ok(ops::sum(&xr.var())),
            DEFAULT_EPS,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(rep.passed);
        assert_eq!(rep.max_abs_grad, 0.0);
        assert_eq!(frozen.grad().sum(), 0.0);
    }
}
