//! Central-difference gradient verification against the tape's backward pass.

use super::param::{ParamId, ParamSet};
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Magnitudes below this are compared absolutely rather than relatively.
    pub floor: f64,
    /// Checks an evenly strided subset of larger parameters.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_entries_per_param: None,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, serde::Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .fold(0.0, |m, p| m.max(p.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(params: &ParamSet, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    Ok(tape.value(loss).item())
}

/// Compares backward-pass gradients of `loss_fn` with `(f(θ+ε) − f(θ−ε)) / 2ε`
/// for every parameter entry. Parameter values are restored afterwards.
pub fn check_gradient<F>(
    params: &mut ParamSet,
    loss_fn: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    tape.backward_into(loss, params)?;

    let ids: Vec<ParamId> = params.ids().collect();
    let mut report = GradCheckReport::default();
    for id in ids {
        let n = params.value(id).len();
        let stride = match cfg.max_entries_per_param {
            Some(max) if max > 0 && n > max => n.div_ceil(max),
            _ => 1,
        };
        let analytic = params.grad(id).clone();
        let mut check = ParamCheck {
            name: params.get(id).name.clone(),
            entries_checked: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            passed: true,
        };
        for e in (0..n).step_by(stride) {
            let orig = params.value(id).data()[e];
            params.get_mut(id).value.data_mut()[e] = orig + cfg.eps;
            let plus = evaluate(params, &loss_fn);
            params.get_mut(id).value.data_mut()[e] = orig - cfg.eps;
            let minus = evaluate(params, &loss_fn);
            params.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.eps);
            let a = analytic.data()[e];
            check.entries_checked += 1;
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.max_rel_error = check
                .max_rel_error
                .max(relative_error(a, numeric, cfg.floor));
        }
        check.passed = check.max_rel_error <= cfg.tol;
        report.params.push(check);
    }
    Ok(report)
}
