//! Central finite-difference verification of tape gradients.

use super::{ParamId, ParamStore, Tape, TensorError, Var};

/// Gradients smaller than this are compared in absolute terms.
const ABS_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    /// Passes when every error is strictly below the tolerance.
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tolerance)
    }
}

/// Compares the tape gradient of `f` with central differences for every
/// entry of every parameter in `store`. `f` must be deterministic.
pub fn grad_check<F>(store: &mut ParamStore, f: F, step: f64, tolerance: f64) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>, TensorError>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check_params(store, &ids, f, step, tolerance)
}

/// [`grad_check`] restricted to `ids`.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>, TensorError>,
{
    store.zero_grads();
    {
        let tape = Tape::new();
        let loss = f(&tape, store)?;
        tape.backward_into(loss, store)?;
    }
    let eval = |store: &ParamStore| -> Result<f64, TensorError> {
        let tape = Tape::inference();
        Ok(f(&tape, store)?.value().item())
    };

    let mut params = Vec::with_capacity(ids.len());
    for &id in ids {
        let analytic_all = store.grad(id).to_vec();
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            entries: analytic_all.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (k, &analytic) in analytic_all.iter().enumerate() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + step;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig - step;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic, numeric);
            if err > check.max_rel_err || k == 0 {
                check.max_rel_err = err;
                check.worst_index = k;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    store.zero_grads();
    Ok(GradCheckReport { params, tolerance })
}
