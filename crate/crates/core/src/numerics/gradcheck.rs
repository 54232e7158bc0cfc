//! Central-difference gradient oracles.

use crate::error::{invalid, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::scalar::Scalar;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

const REL_FLOOR: f64 = 1e-8;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + REL_FLOOR)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 0.1) {
        return invalid(format!("finite-difference eps {eps} outside (0, 0.1)"));
    }
    Ok(())
}

/// Max over coordinates of `|analytic - central difference| / (|analytic| + 1e-8)`
/// for a scalar function of one tensor.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<'_, T>, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |pt: Tensor<T>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(pt, false);
        let l = f(&mut t, v)?;
        Ok(t.value(l).item().as_f64())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] += T::lit(eps);
        minus.data_mut()[i] -= T::lit(eps);
        let num = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        if !num.is_finite() {
            return invalid(format!("function not finite near coordinate {i}"));
        }
        worst = worst.max(rel_err(analytic.data()[i].as_f64(), num));
    }
    Ok(worst)
}

/// A scalar objective over the parameters bound to a tape, evaluable at any
/// precision. Inputs are captured as `f64` and cast inside `eval`.
pub trait Objective {
    fn eval<T: Scalar>(&self, tape: &mut Tape<'_, T>) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compares the analytic parameter gradient computed at precision `A`
/// against central differences evaluated at precision `N`.
///
/// Running `N = f64` is the shadow mode used to judge `f32` gradients.
/// `max_coords` limits the coordinates visited per parameter (evenly strided).
pub fn check_param_grads<A: Scalar, N: Scalar>(
    store: &ParamStore<f64>,
    objective: &impl Objective,
    eps: f64,
    max_coords: usize,
) -> Result<GradCheckReport> {
    check_eps(eps)?;
    let analytic_store: ParamStore<A> = store.cast();
    let mut tape = Tape::with_params(&analytic_store);
    let loss = objective.eval(&mut tape)?;
    let grads = tape.backward(loss)?;
    let analytic = tape.param_grads(&grads);

    let mut shadow: ParamStore<N> = store.cast();
    let eval = |s: &ParamStore<N>| -> Result<f64> {
        let mut t = Tape::inference(s);
        let l = objective.eval(&mut t)?;
        Ok(t.value(l).item().as_f64())
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let len = store.get(id).len();
        let stride = len.div_ceil(max_coords.max(1)).max(1);
        for i in (0..len).step_by(stride) {
            let orig = shadow.get(id).data()[i];
            shadow.get_mut(id).data_mut()[i] = orig + N::lit(eps);
            let up = eval(&shadow)?;
            shadow.get_mut(id).data_mut()[i] = orig - N::lit(eps);
            let down = eval(&shadow)?;
            shadow.get_mut(id).data_mut()[i] = orig;
            let num = (up - down) / (2.0 * eps);
            let err = rel_err(analytic[id.index()].data()[i].as_f64(), num);
            report.coords_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
