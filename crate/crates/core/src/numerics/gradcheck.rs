//! Central finite-difference oracle for reverse-mode gradients.

use crate::numerics::{Graph, Result, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub param: usize,
    pub max_rel_error: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// The loss did not reach this parameter on the tape.
    pub gradient_absent: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    /// Set when the function produced a non-finite value.
    pub non_finite: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.non_finite.is_none() && self.max_rel_error() < self.tolerance
    }
}

/// Compares the tape gradient of `f` against central differences for every
/// element of every parameter. `f` receives one tracked [`Var`] per entry of
/// `params`, in order, and must return a `1 x 1` node.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(g.scalar(out))
    };

    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        tolerance: cfg.tolerance,
        non_finite: None,
    };
    if !g.scalar(out).is_finite() {
        report.non_finite = Some("base evaluation".to_string());
        return Ok(report);
    }
    let grads = g.backward(out)?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var).cloned();
        let mut check = ParamCheck {
            param: pi,
            max_rel_error: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
            gradient_absent: analytic.is_none(),
        };
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + cfg.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - cfg.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                report.non_finite = Some(format!("param {pi} element {e}"));
                return Ok(report);
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[e]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if rel > check.max_rel_error || e == 0 {
                check.max_rel_error = rel;
                check.worst_element = e;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_at_three() {
        let w = Tensor::scalar(3.0);
        let report = grad_check(
            |g, v| g.matmul(v[0], v[0]).map(|x| g.sum(x)),
            &[w],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!((report.params[0].analytic - 6.0).abs() < 1e-12);
        assert!(report.params[0].max_rel_error < 1e-9);
        assert!(report.passed());
    }

    #[test]
    fn unreached_parameter_is_flagged_absent() {
        let report = grad_check(
            |g, v| Ok(g.sum(v[0])),
            &[Tensor::scalar(1.0), Tensor::scalar(2.0)],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.params[0].gradient_absent);
        assert!(report.params[1].gradient_absent);
        assert_eq!(report.params[1].numeric, 0.0);
        assert!(report.passed());
    }

    #[test]
    fn non_finite_is_a_failure_with_location() {
        let report = grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[0])?;
                let ln = g.layer_norm(y, v[0], v[0], 0.0)?;
                Ok(g.sum(ln))
            },
            &[Tensor::scalar(1.0)],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.non_finite.is_some());
    }
}
