//! Central finite-difference oracle for tape gradients (64-bit only).

use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Absolute difference below which an element is considered exact.
pub const NEAR_ZERO_ATOL: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    fn record(&mut self, input: usize, elem: usize, err: f64) {
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((input, elem));
        }
    }
}

/// Relative error with an absolute floor for values near zero.
pub fn relative_error(analytic: f64, numeric: f64, atol: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= atol {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h`
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &mut [f64], i: usize, h: f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// Checks every element of every input against central differences.
///
/// `build` must produce a scalar from the given input variables.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], build: F, h: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    check_against_surrogate(inputs, &build, &build, h)
}

/// Like [`check_gradients`], but finite differences are taken on `surrogate`.
///
/// Graphs containing `stop_gradient` are checked against a surrogate in which
/// each stopped value is replaced by a constant captured at the base point.
pub fn check_against_surrogate<F, S>(
    inputs: &[Tensor<f64>],
    build: F,
    surrogate: S,
    h: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
    S: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.var(v.clone())).collect();
        let out = surrogate(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.var(v.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            report.record(k, i, relative_error(a, numeric, NEAR_ZERO_ATOL));
        }
    }
    Ok(report)
}

/// Checks selected scalar coordinates of a parameter store.
///
/// `build` binds parameters from the given store (trainable) and returns a
/// scalar loss. Stop-gradient values are frozen at the base point for the
/// finite-difference evaluations.
pub fn check_store_gradients<F>(
    store: &ParamStore<f64>,
    coords: &[(String, usize)],
    build: F,
    h: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    tape.backward(loss)?;
    let grads = tape.named_grads();
    let frozen = tape.stopped_values().to_vec();

    let eval = |s: &ParamStore<f64>| -> Result<f64, TensorError> {
        let mut t = Tape::with_frozen_stops(frozen.clone());
        let out = build(&mut t, s)?;
        Ok(t.value(out).item())
    };

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (k, (name, i)) in coords.iter().enumerate() {
        let a = grads.get(name).map_or(0.0, |g| g.data()[*i]);
        let orig = work.expect(name).data()[*i];
        work.get_mut(name).expect("coordinate names a parameter").data_mut()[*i] = orig + h;
        let up = eval(&work)?;
        work.get_mut(name).expect("coordinate names a parameter").data_mut()[*i] = orig - h;
        let down = eval(&work)?;
        work.get_mut(name).expect("coordinate names a parameter").data_mut()[*i] = orig;
        let numeric = (up - down) / (2.0 * h);
        report.record(k, *i, relative_error(a, numeric, NEAR_ZERO_ATOL));
    }
    Ok(report)
}
