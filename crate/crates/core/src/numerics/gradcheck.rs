//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor on the denominator of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Agreement at which [`grad_check_steps`] stops trying further steps.
pub const STEP_SEARCH_STOP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Dimension {
            op: "grad_check",
            lhs: v.shape().to_vec(),
            rhs: vec![],
        });
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::Numeric {
            op: "grad_check objective".into(),
        });
    }
    Ok(x)
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences `(f(x+ε) − f(x−ε)) / 2ε`, element by element.
pub fn grad_check<F>(f: F, params: &[Tensor], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_steps(f, params, &[epsilon])
}

/// [`grad_check`] over several step sizes: each element is compared against
/// the central difference, among `epsilons`, that agrees best with it. Steps
/// are tried in order and the search stops once an element agrees within
/// [`STEP_SEARCH_STOP`].
///
/// A single step cannot resolve gradients near 1e-8 (rounding dominates small
/// steps, truncation large ones); a wrong gradient disagrees at every step.
pub fn grad_check_steps<F>(f: F, params: &[Tensor], epsilons: &[f64]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if epsilons.is_empty() {
        return Err(Error::Config("no finite-difference step given".into()));
    }
    if let Some(bad) = epsilons.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
        return Err(Error::Config(format!("invalid epsilon {bad}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Dimension {
            op: "grad_check",
            lhs: g.value(out).shape().to_vec(),
            rhs: vec![],
        });
    }
    if !g.value(out).item().is_finite() {
        return Err(Error::Numeric {
            op: "grad_check objective".into(),
        });
    }
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, (param, &var)) in params.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(var, param.shape());
        for ei in 0..param.len() {
            let orig = param.data()[ei];
            let a = analytic.data()[ei];
            let mut best: Option<(f64, f64)> = None;
            for &epsilon in epsilons {
                probe[pi].data_mut()[ei] = orig + epsilon;
                let plus = evaluate(&f, &probe)?;
                probe[pi].data_mut()[ei] = orig - epsilon;
                let minus = evaluate(&f, &probe)?;
                probe[pi].data_mut()[ei] = orig;
                let numeric = (plus - minus) / (2.0 * epsilon);
                let err = relative_error(a, numeric);
                if best.is_none_or(|(e, _)| err < e) {
                    best = Some((err, numeric));
                }
                if err < STEP_SEARCH_STOP {
                    break;
                }
            }
            let (err, numeric) = best.expect("at least one step");
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((pi, ei));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
