//! Central finite-difference verification of tape gradients.

use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Outcome of a finite-difference sweep over every parameter scalar.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over scalars of `|analytic - fd| / (|fd| + 1e-8)`
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub checked: usize,
}

fn eval<F>(store: &ParamStore, loss: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let l = loss(&tape, store)?;
    Ok(l.value().item())
}

/// Compare analytic gradients of `loss` with central differences of step `h`.
///
/// `store` is perturbed in place and restored before returning.
pub fn check_gradients<F>(store: &mut ParamStore, h: f64, loss: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let grads = {
        let tape = Tape::new();
        let l = loss(&tape, store)?;
        tape.backward(l)?
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).value.len();
        for i in 0..n {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(store, &loss)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(store, &loss)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let rel = (analytic - fd).abs() / (fd.abs() + 1e-8);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = Some(store.get(id).name.clone());
                report.worst_index = i;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
