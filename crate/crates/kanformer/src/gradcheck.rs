//! Finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

fn check_step(h: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    Ok(())
}

/// Max over coordinates of |analytic − central difference| / max(1, |analytic|)
/// for a scalar function of one tensor input.
pub fn finite_diff_check<F>(f: &F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, ValueId) -> Result<ValueId>,
{
    check_step(h)?;
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let loss = f(&mut tape, xid)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.wrt_or_zeros(xid, x.numel());

    let eval = |xt: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.leaf(xt.clone());
        let l = f(&mut t, id)?;
        t.value(l).item()
    };
    let mut max_err: f64 = 0.0;
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (eval(&xp)? - eval(&xm)?) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

/// Same check for a scalar function of store-held parameters; verifies the
/// gradient of every parameter in `targets` by bumping its entries in place.
///
/// The closure must be a pure function of the store values (run modules in
/// eval mode so batch-norm running statistics stay fixed).
pub fn finite_diff_check_params<F>(
    f: &F,
    store: &mut ParamStore,
    targets: &[ParamId],
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &mut ParamStore) -> Result<ValueId>,
{
    check_step(h)?;
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    tape.accumulate_param_grads(&grads, store);
    let analytic: Vec<Vec<f64>> = targets
        .iter()
        .map(|&t| store.get(t).grad.data().to_vec())
        .collect();

    let mut max_err: f64 = 0.0;
    for (ti, &pid) in targets.iter().enumerate() {
        for i in 0..store.get(pid).value.numel() {
            let orig = store.get(pid).value.data()[i];
            store.get_mut(pid).value.data_mut()[i] = orig + h;
            let fp = {
                let mut t = Tape::new();
                let l = f(&mut t, store)?;
                t.value(l).item()?
            };
            store.get_mut(pid).value.data_mut()[i] = orig - h;
            let fm = {
                let mut t = Tape::new();
                let l = f(&mut t, store)?;
                t.value(l).item()?
            };
            store.get_mut(pid).value.data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[ti][i];
            let err = (a - fd).abs() / a.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
