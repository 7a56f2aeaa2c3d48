//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::numerics::params::ParamStore;
use crate::numerics::tape::{Tape, Var};
use crate::par::{self, Exec};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Parameter name, flat index, analytic and numeric values at the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare the tape gradient of `model_fn` against central differences
/// `(L(θ+ε) − L(θ−ε)) / 2ε`, element by element, over every parameter.
///
/// `model_fn` must be deterministic: it is called once for the analytic
/// gradient and twice per scalar parameter.
pub fn grad_check<F>(params: &ParamStore, epsilon: f64, exec: Exec, model_fn: F) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Tape<'p>, &'p ParamStore) -> Result<Var> + Sync + Send,
{
    let analytic = {
        let mut tape = Tape::new();
        let loss = model_fn(&mut tape, params)?;
        tape.backward(loss, params)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = model_fn(&mut tape, store)?;
        Ok(tape.value(loss).item())
    };

    let ids: Vec<_> = params.ids().collect();
    let per_param = par::map(exec, &ids, |&id| -> Result<(f64, usize, f64, f64, usize)> {
        let mut store = params.clone();
        let n = store.get(id).len();
        let mut worst = (0.0, 0, 0.0, 0.0, n);
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + epsilon;
            let plus = eval(&store)?;
            store.get_mut(id).data_mut()[i] = orig - epsilon;
            let minus = eval(&store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.get(id).data()[i];
            let err = relative_error(a, numeric);
            if err > worst.0 || i == 0 {
                worst = (err, i, a, numeric, n);
            }
        }
        Ok(worst)
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (id, res) in ids.iter().zip(per_param) {
        let (err, idx, a, num, n) = res?;
        report.checked += n;
        if n > 0 && (report.worst.is_none() || err > report.max_rel_error) {
            report.max_rel_error = err;
            report.worst = Some((params.name(*id).to_string(), idx, a, num));
        }
    }
    Ok(report)
}
