//! Central finite-difference checks of tape gradients.

use serde::Serialize;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Comparison settings. The relative error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-3,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `d f / d param` for every coordinate of every named parameter.
///
/// `f` receives a fresh tape and one leaf per parameter, in order, and must
/// return a scalar.
pub fn check<F>(params: &[(String, Tensor)], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("parameter leaves require grad"))
        .collect();

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut checks = Vec::with_capacity(params.len());
    for (p, (name, _)) in params.iter().enumerate() {
        let mut check = ParamCheck {
            name: name.clone(),
            numel: values[p].numel(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
            pass: true,
        };
        for i in 0..values[p].numel() {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + opts.step;
            let up = eval(&values)?;
            values[p].data_mut()[i] = orig - opts.step;
            let down = eval(&values)?;
            values[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[p].data()[i];
            let rel = rel_err(a, numeric, opts.floor);
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = i;
            }
        }
        check.pass = check.max_rel_err < opts.tolerance;
        checks.push(check);
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(GradCheckReport {
        step: opts.step,
        tolerance: opts.tolerance,
        params: checks,
        pass,
    })
}
