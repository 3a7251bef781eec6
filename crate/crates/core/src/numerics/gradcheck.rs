//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values; it never reads tape
//! gradients. Relative error is `|a - n| / max(|a|, |n|, 1e-2)` per entry.

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const MAGNITUDE_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Name (or input index) and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }

    fn record(&mut self, what: &str, idx: usize, analytic: f64, numeric: f64) {
        let err = rel_err(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = Some((what.to_string(), idx));
        }
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(MAGNITUDE_FLOOR)
}

/// Indices of a length-`n` buffer to probe, at most `limit`, evenly spread.
fn probe_indices(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(l) if l < n => (0..l).map(|k| k * n / l).collect(),
        _ => (0..n).collect(),
    }
}

/// An input matrix for [`check_fn`]: `(rows, cols, values)`.
pub type Input = (usize, usize, Vec<f64>);

/// Checks gradients of `f` with respect to every entry of every input.
pub fn check_fn<F>(inputs: &[Input], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Input], grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars = vals
            .iter()
            .map(|(r, c, v)| tape.leaf(*r, *c, v.clone(), grad))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        let value = tape.scalar(loss);
        if !grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(&v, (_, _, x))| {
                tape.grad(v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; x.len()])
            })
            .collect();
        Ok((value, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheckReport::default();
    let mut work: Vec<Input> = inputs.to_vec();
    for (k, grads) in analytic.iter().enumerate() {
        for j in 0..grads.len() {
            let orig = work[k].2[j];
            work[k].2[j] = orig + step;
            let (fp, _) = eval(&work, false)?;
            work[k].2[j] = orig - step;
            let (fm, _) = eval(&work, false)?;
            work[k].2[j] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            report.record(&format!("input{k}"), j, grads[j], numeric);
        }
    }
    Ok(report)
}

/// Checks gradients of a loss with respect to the trainable parameters of a
/// store owned by `model`. `loss` must bind that store on the tape it is
/// given and return the binding. Because parameters are `f32`, the numeric
/// derivative divides by the step actually realized after rounding.
pub fn check_store<M, S, F>(
    model: &mut M,
    store_of: S,
    step: f64,
    max_per_param: Option<usize>,
    loss: F,
) -> Result<GradCheckReport>
where
    S: Fn(&mut M) -> &mut ParamStore,
    F: Fn(&M, &mut Tape) -> Result<(Var, Bound)>,
{
    let mut tape = Tape::new();
    let (l, bound) = loss(model, &mut tape)?;
    tape.backward(l)?;
    let grads = bound.gradients(&tape, store_of(model));
    let ids: Vec<_> = store_of(model).ids().collect();
    let mut report = GradCheckReport::default();
    for id in ids {
        let Some(analytic) = grads.get(id).map(|g| g.to_vec()) else {
            continue;
        };
        let name = store_of(model).name(id).to_string();
        for j in probe_indices(analytic.len(), max_per_param) {
            let orig = store_of(model).get(id).data()[j];
            let plus = (orig as f64 + step) as f32;
            let minus = (orig as f64 - step) as f32;
            store_of(model).get_mut(id).data_mut()[j] = plus;
            let fp = {
                let mut t = Tape::new();
                let (l, _) = loss(model, &mut t)?;
                t.scalar(l)
            };
            store_of(model).get_mut(id).data_mut()[j] = minus;
            let fm = {
                let mut t = Tape::new();
                let (l, _) = loss(model, &mut t)?;
                t.scalar(l)
            };
            store_of(model).get_mut(id).data_mut()[j] = orig;
            let numeric = (fp - fm) / (plus as f64 - minus as f64);
            report.record(&name, j, analytic[j], numeric);
        }
    }
    Ok(report)
}
