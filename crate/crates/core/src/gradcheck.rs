//! Central finite-difference verification of tape gradients (64-bit).

use crate::error::Result;
use crate::tensor::{Graph, ParamSet, Tape, Tensor, Var};

/// Smallest denominator used when forming relative errors, so gradients that
/// are numerically zero are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// `(input, element)` at which the largest error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compares the tape gradient of scalar `f` with central differences of
/// step `step`, for every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            probe[i].data_mut()[e] = orig + step;
            let plus = eval(&f, &probe)?;
            probe[i].data_mut()[e] = orig - step;
            let minus = eval(&f, &probe)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[i][e], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
/// Compares parameter gradients of the scalar built by `f` with central
/// differences, for every element of every trainable parameter. `f` runs on
/// a fresh graph each time; running-statistic updates are discarded.
pub fn check_params<F>(params: &ParamSet<f64>, training: bool, f: F, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params, training);
        let out = f(&mut g)?;
        g.backward(out)?;
        g.param_grads()
    };
    let eval = |p: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new(p, training);
        let out = f(&mut g)?;
        g.value(out).item()
    };
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = params.clone();
    for i in 0..params.len() {
        if !params.entry(i).trainable {
            continue;
        }
        for e in 0..params.entry(i).value.numel() {
            let orig = params.entry(i).value.data()[e];
            probe.entry_mut(i).value.data_mut()[e] = orig + step;
            let plus = eval(&probe)?;
            probe.entry_mut(i).value.data_mut()[e] = orig - step;
            let minus = eval(&probe)?;
            probe.entry_mut(i).value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].as_ref().map_or(0.0, |g| g[e]);
            let err = relative_error(a, numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
