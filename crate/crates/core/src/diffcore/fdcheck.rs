use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar loss from leaves bound to `params`; it must be
/// deterministic (any noise enters as constant data). Returns the maximum
/// relative error over every parameter element.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(finite_diff_report(f, params, eps)?.max_error)
}

/// Location and values of the worst disagreement found by a check.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FdReport {
    pub max_error: f64,
    pub param: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Like [`finite_diff_check`] but reports where the worst error occurred.
pub fn finite_diff_report<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let v = g.value(loss);
        if !v.is_scalar() {
            return Err(Error::shape("finite-difference target must be scalar"));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut probe: Vec<Tensor<f64>> = params.to_vec();
    let mut worst = FdReport::default();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            probe[p].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[p].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::numerics("finite_diff_check", "non-finite difference"));
            }
            let a = analytic.data()[i];
            let err = relative_error(a, numeric);
            if err > worst.max_error {
                worst = FdReport { max_error: err, param: p, element: i, analytic: a, numeric };
            }
        }
    }
    Ok(worst)
}
