//! Central finite-difference oracle for tape gradients.

use super::params::{Bindings, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error. Central differences at h = 1e-6
/// carry roughly 1e-10 of rounding noise, so entries smaller than this are
/// effectively compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over elements of |g_tape − g_fd| / max(REL_FLOOR, |g_tape| + |g_fd|)
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub worst_tape: f64,
    pub worst_fd: f64,
    pub elements: usize,
}

/// Compare tape gradients of `f` with `(f(θ+h) − f(θ−h)) / 2h` for every
/// element of every parameter in `params`.
///
/// `f` builds a scalar loss on a fresh tape from the bound parameters and
/// must be deterministic. Values detached on the unperturbed pass are
/// replayed in every perturbed pass, so stop-gradient targets stay fixed and
/// both sides differentiate the same surrogate.
pub fn finite_diff_check<F>(params: &ParamStore<f64>, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bindings) -> Result<Var>,
{
    let mut tape = Tape::new();
    let binds = params.bind(&mut tape, true);
    let root = f(&mut tape, &binds)?;
    let value = tape.scalar(root);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective is {value}")));
    }
    let grads = tape.backward(root)?;
    let tape_grads = params.collect_grads(&binds, &grads);
    let frozen = tape.detached_values();
    drop(tape);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::with_frozen_detached(frozen.clone());
        let binds = store.bind(&mut tape, false);
        let root = f(&mut tape, &binds)?;
        let v = tape.scalar(root);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("objective is {v}")));
        }
        Ok(v)
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_tape: 0.0,
        worst_fd: 0.0,
        elements: 0,
    };
    for id in params.ids_by_name() {
        let n = params.get(id).tensor.len();
        for i in 0..n {
            let orig = params.get(id).tensor.data()[i];
            work.get_mut(id).tensor.data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(id).tensor.data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(id).tensor.data_mut()[i] = orig;

            let fd = (plus - minus) / (2.0 * step);
            let tg = tape_grads[id.0].data()[i];
            let err = (tg - fd).abs() / (tg.abs() + fd.abs()).max(REL_FLOOR);
            report.elements += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.get(id).name.clone(), i));
                report.worst_tape = tg;
                report.worst_fd = fd;
            }
        }
    }
    Ok(report)
}
