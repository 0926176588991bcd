//! Central finite-difference oracle for analytic gradients.

use std::collections::BTreeMap;

use super::params::{Graph, ParamSet};
use super::tape::Var;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Max relative error per parameter name.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
}

/// Relative error `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval(params: &ParamSet, f: &impl Fn(&mut Graph<'_>) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::inference(params);
    let out = f(&mut g)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::pre(
            "finite_diff_check",
            "function must return a scalar",
        ));
    }
    Ok(v.data()[0])
}

/// Compares the analytic gradient of every entry of every tensor in `params`
/// with `(f(θ+eps) − f(θ−eps)) / 2eps`.
pub fn finite_diff_check<F>(params: &ParamSet, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let names: Vec<String> = params.names().cloned().collect();
    finite_diff_check_only(params, &names, eps, f)
}

/// Like [`finite_diff_check`], restricted to the named tensors.
pub fn finite_diff_check_only<F>(
    params: &ParamSet,
    names: &[String],
    eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let base = eval(params, &f)?;
    let again = eval(params, &f)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }
    let analytic = {
        let mut g = Graph::training(params);
        let out = f(&mut g)?;
        g.backward(out)?
    };
    let mut probe = params.clone();
    let mut report = GradCheckReport::default();
    for name in names {
        let n = params.get(name)?.numel();
        let zeros = vec![0.0; n];
        let grad = analytic.get(name).unwrap_or(&zeros);
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = probe.get(name)?.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = eval(&probe, &f)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = eval(&probe, &f)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(rel_err(grad[i], numeric));
            report.checked += 1;
        }
        report.max_rel_err = report.max_rel_err.max(worst);
        report.per_param.insert(name.clone(), worst);
    }
    Ok(report)
}
