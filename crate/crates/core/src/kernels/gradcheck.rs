//! Central finite-difference comparison against the tape gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::par;

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape)?;
    Ok(tape.value(loss).item())
}

/// Largest `|g_ad - g_fd| / max(1, |g_fd|)` over every scalar in `store`,
/// where `g_fd = (f(p + h) - f(p - h)) / 2h`.
///
/// `f` must return a `1 x 1` loss. Parameters are perturbed in parallel, each
/// on its own copy of the store.
pub fn grad_check<F>(store: &ParamStore, f: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var> + Sync,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        if tape.shape(loss) != (1, 1) {
            return Err(Error::dim("gradient check needs a scalar loss"));
        }
        tape.backward(loss).into_param_grads()
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let per_param = par::map(&ids, |&id| -> Result<f64> {
        let mut local = store.clone();
        let n = local.value(id).len();
        let mut worst = 0.0f64;
        for k in 0..n {
            let orig = local.value(id).as_slice()[k];
            local.value_mut(id).as_mut_slice()[k] = orig + step;
            let up = eval(&local, &f)?;
            local.value_mut(id).as_mut_slice()[k] = orig - step;
            let down = eval(&local, &f)?;
            local.value_mut(id).as_mut_slice()[k] = orig;
            let fd = (up - down) / (2.0 * step);
            let ad = analytic[id.index()]
                .as_ref()
                .map_or(0.0, |g| g.as_slice()[k]);
            if !fd.is_finite() || !ad.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for `{}`[{k}]",
                    store.name(id)
                )));
            }
            worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
        }
        Ok(worst)
    });
    per_param
        .into_iter()
        .try_fold(0.0f64, |acc, r| r.map(|e| acc.max(e)))
}
